import hashlib

import numpy as np
import pytest
from scipy import ndimage

from ccdm.data import (
    Dataset,
    load_dataset,
    make_count_dataset,
    make_rotor_dataset,
    render_rotor,
    save_dataset,
    to_float,
    to_uint8,
)
from ccdm.errors import MissingArtifactError


class TestDatasetInvariants:
    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            Dataset(images=np.zeros((2, 1, 8, 8), np.float32), raw_labels=np.zeros(3))

    def test_pixel_range_checked(self):
        bad = np.full((1, 1, 4, 4), 1.5, np.float32)
        with pytest.raises(ValueError):
            Dataset(images=bad, raw_labels=np.zeros(1))

    def test_uint8_round_trip(self):
        u = np.arange(256, dtype=np.uint8).reshape(1, 16, 16)
        assert np.array_equal(to_uint8(to_float(u)), u)


class TestRotor:
    def test_half_turn_aliasing(self):
        a = render_rotor(0.0, 0, 32)
        b = render_rotor(180.0, 0, 32)
        assert np.array_equal(a, b)

    def test_determinism(self):
        d1 = make_rotor_dataset(9, 3, size=32, seed=5)
        d2 = make_rotor_dataset(9, 3, size=32, seed=5)
        assert np.array_equal(d1.images, d2.images)
        assert np.array_equal(d1.raw_labels, d2.raw_labels)
        assert np.array_equal(d1.class_tags, d2.class_tags)

    def test_seed_changes_content(self):
        d1 = make_rotor_dataset(5, 2, seed=1)
        d2 = make_rotor_dataset(5, 2, seed=2)
        assert not np.array_equal(d1.images, d2.images)

    def test_grid_and_tags(self):
        ds = make_rotor_dataset(10, 4, size=32, seed=0)
        assert len(ds) == 40
        assert ds.image_shape == (1, 32, 32)
        assert ds.raw_labels.min() == 0.0 and ds.raw_labels.max() == 90.0
        assert set(np.unique(ds.class_tags)) <= {0, 1, 2}
        # 10 grid angles, each repeated 4 times.
        assert len(np.unique(ds.raw_labels)) == 10

    def test_sparse_regime_shape(self):
        ds = make_rotor_dataset(45, 10, seed=0)
        assert len(ds) == 450

    def test_rejects_bad_grid(self):
        with pytest.raises(ValueError):
            make_rotor_dataset(1, 5)
        with pytest.raises(ValueError):
            make_rotor_dataset(5, 0)

    def test_angles_differ(self):
        a = render_rotor(10.0, 0, 32)
        b = render_rotor(55.0, 0, 32)
        assert not np.array_equal(a, b)


class TestCount:
    def test_connected_components_match_label(self):
        ds = make_count_dataset(6, 3, size=32, seed=3)
        for img, k in zip(ds.images, ds.raw_labels):
            binary = img[0] > 0.0
            _, n = ndimage.label(binary)
            assert n == int(k)

    def test_odd_only(self):
        ds = make_count_dataset(7, 2, seed=0, odd_only=True)
        assert set(np.unique(ds.raw_labels)) == {1.0, 3.0, 5.0, 7.0}

    def test_rejects_zero_max(self):
        with pytest.raises(ValueError):
            make_count_dataset(0, 5)

    def test_determinism(self):
        d1 = make_count_dataset(4, 2, seed=9)
        d2 = make_count_dataset(4, 2, seed=9)
        assert np.array_equal(d1.images, d2.images)


class TestSaveLoad:
    def test_round_trip(self, tmp_path):
        ds = make_rotor_dataset(6, 2, size=32, seed=7)
        root = save_dataset(ds, tmp_path / "rotor")
        back = load_dataset(root)
        assert np.array_equal(back.images, ds.images)
        assert np.array_equal(back.raw_labels, ds.raw_labels)
        assert np.array_equal(back.class_tags, ds.class_tags)

    def test_round_trip_bit_stable(self, tmp_path):
        ds = make_count_dataset(3, 2, seed=1)
        r1 = save_dataset(ds, tmp_path / "a")
        back = load_dataset(r1)
        r2 = save_dataset(back, tmp_path / "b")

        def digest(root):
            h = hashlib.sha256()
            for p in sorted(root.glob("*.png")):
                h.update(p.read_bytes())
            return h.hexdigest()

        assert digest(r1) == digest(r2)

    def test_two_row_manifest(self, tmp_path):
        ds = Dataset(
            images=to_float(np.random.default_rng(0).integers(0, 256, (2, 1, 8, 8)).astype(np.uint8)),
            raw_labels=np.array([1.0, 2.0]),
        )
        root = save_dataset(ds, tmp_path / "two")
        assert len(load_dataset(root)) == 2

    def test_missing_image_names_row(self, tmp_path):
        ds = make_rotor_dataset(3, 1, seed=0)
        root = save_dataset(ds, tmp_path / "x")
        (root / "000001.png").unlink()
        with pytest.raises(MissingArtifactError, match="row 3"):
            load_dataset(root)

    def test_unparsable_label_names_row(self, tmp_path):
        ds = make_rotor_dataset(3, 1, seed=0)
        root = save_dataset(ds, tmp_path / "x")
        text = (root / "labels.csv").read_text().splitlines()
        text[2] = text[2].rsplit(",", 1)[0].split(",")[0] + ",not_a_number,0"
        (root / "labels.csv").write_text("\n".join(text) + "\n")
        with pytest.raises(ValueError, match="row 3"):
            load_dataset(root)

    def test_bad_header_rejected(self, tmp_path):
        ds = make_rotor_dataset(3, 1, seed=0)
        root = save_dataset(ds, tmp_path / "x")
        text = (root / "labels.csv").read_text().splitlines()
        text[0] = "file,y"
        (root / "labels.csv").write_text("\n".join(text) + "\n")
        with pytest.raises(ValueError, match="header"):
            load_dataset(root)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            load_dataset(tmp_path / "nowhere")

    def test_generator_spec_written(self, tmp_path):
        ds = make_rotor_dataset(3, 1, seed=0)
        root = save_dataset(ds, tmp_path / "x")
        assert (root / "generator.json").is_file()
