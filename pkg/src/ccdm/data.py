"""Dataset ingestion and deterministic synthetic dataset generators.

Datasets are directories holding 8-bit PNG files plus a labels.csv manifest
with the exact header "filename,label" or "filename,label,class". Pixels
map to floats as x = pixel / 127.5 - 1. Generators draw all randomness
from keyed Philox streams so the same arguments produce bit-identical
datasets on any platform.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import MissingArtifactError
from .rng import stream

LABELS_FILE = "labels.csv"
GENERATOR_FILE = "generator.json"


@dataclass
class Dataset:
    """Images in [-1, 1] with raw (unnormalized) labels.

    images: (N, C, W, H) float32; raw_labels: (N,) float64;
    class_tags: (N,) int64 or None (categorical ids for the diversity
    metric); provenance: generator spec or source path.
    """

    images: np.ndarray
    raw_labels: np.ndarray
    class_tags: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, W, H), got {self.images.shape}")
        if len(self.images) != len(self.raw_labels):
            raise ValueError(
                f"{len(self.images)} images vs {len(self.raw_labels)} labels"
            )
        if self.class_tags is not None and len(self.class_tags) != len(self.images):
            raise ValueError("class_tags length mismatch")
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < -1.0 or hi > 1.0:
            raise ValueError(f"pixel range [{lo}, {hi}] outside [-1, 1]")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


def to_float(pixels_u8: np.ndarray) -> np.ndarray:
    return (pixels_u8.astype(np.float32) / 127.5) - 1.0


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((images + 1.0) * 127.5), 0, 255).astype(np.uint8)


def load_dataset(root_path: str | Path) -> Dataset:
    """Load a dataset directory written by save_dataset or by hand."""
    root = Path(root_path)
    manifest = root / LABELS_FILE
    if not manifest.is_file():
        raise MissingArtifactError(f"no {LABELS_FILE} under {root}")
    with open(manifest, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{manifest}: empty manifest") from None
        if header not in (["filename", "label"], ["filename", "label", "class"]):
            raise ValueError(f"{manifest}: bad header {header!r}")
        has_class = len(header) == 3
        images, labels, tags = [], [], []
        shape = None
        for i, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{manifest} row {i}: expected {len(header)} fields")
            path = root / row[0]
            if not path.is_file():
                raise MissingArtifactError(f"{manifest} row {i}: missing image {path}")
            try:
                label = float(row[1])
            except ValueError:
                raise ValueError(f"{manifest} row {i}: unparsable label {row[1]!r}") from None
            arr = np.asarray(Image.open(path))
            if arr.ndim == 2:
                arr = arr[None]
            else:
                arr = arr.transpose(2, 0, 1)
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise ValueError(
                    f"{manifest} row {i}: image shape {arr.shape} != {shape}"
                )
            images.append(to_float(arr))
            labels.append(label)
            if has_class:
                tags.append(int(row[2]))
    if not images:
        raise ValueError(f"{manifest}: no data rows")
    return Dataset(
        images=np.stack(images),
        raw_labels=np.array(labels, dtype=np.float64),
        class_tags=np.array(tags, dtype=np.int64) if has_class else None,
        provenance={"source": str(root)},
    )


def save_dataset(ds: Dataset, root_path: str | Path) -> Path:
    """Write PNGs, labels.csv, and the generator spec (when present)."""
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    pixels = to_uint8(ds.images)
    header = ["filename", "label"] + (["class"] if ds.class_tags is not None else [])
    with open(root / LABELS_FILE, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(ds)):
            name = f"{i:06d}.png"
            arr = pixels[i]
            img = Image.fromarray(arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0))
            img.save(root / name)
            row = [name, repr(float(ds.raw_labels[i]))]
            if ds.class_tags is not None:
                row.append(str(int(ds.class_tags[i])))
            writer.writerow(row)
    if ds.provenance:
        with open(root / GENERATOR_FILE, "w") as fh:
            json.dump(ds.provenance, fh, indent=2, sort_keys=True)
    return root


# Rotor shapes: (kind, half_length or semi-major, half_width or semi-minor).
_ROTOR_SHAPES = (("bar", 11.0, 0.8), ("bar", 8.5, 1.8), ("ellipse", 10.5, 2.6))


def render_rotor(theta_deg: float, shape_id: int, size: int = 32,
                 center: tuple[float, float] | None = None, scale: float = 1.0,
                 intensity: float = 1.0) -> np.ndarray:
    """Render one anti-aliased rotated shape; returns (size, size) in [0, 1].

    All shapes are 180-degree symmetric, so the angle is reduced mod 180
    and the generator keeps labels in [0, 90] by default.
    """
    kind, a, b = _ROTOR_SHAPES[shape_id % len(_ROTOR_SHAPES)]
    a, b = a * scale, b * scale
    if center is None:
        center = ((size - 1) / 2.0, (size - 1) / 2.0)
    theta = math.radians(theta_deg % 180.0)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xs - center[0], ys - center[1]
    u = dx * cos_t + dy * sin_t
    v = -dx * sin_t + dy * cos_t
    if kind == "bar":
        d = np.maximum(np.abs(u) - a, np.abs(v) - b)
    else:
        r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        d = (r - 1.0) * b
    coverage = np.clip(0.5 - d, 0.0, 1.0)
    return coverage * intensity


def make_rotor_dataset(n_angles: int, per_angle: int, size: int = 32, seed: int = 0,
                       theta_min: float = 0.0, theta_max: float = 90.0) -> Dataset:
    """Rotated-shape dataset: labels are angles in degrees, class tags are
    shape ids. Angles lie on a uniform grid of n_angles points."""
    if n_angles < 2 or per_angle < 1:
        raise ValueError(f"bad grid: n_angles={n_angles}, per_angle={per_angle}")
    if not 0.0 <= theta_min < theta_max <= 180.0:
        raise ValueError(f"bad angle range [{theta_min}, {theta_max}]")
    rng = stream(seed, 1)
    angles = np.linspace(theta_min, theta_max, n_angles)
    images, labels, tags = [], [], []
    for theta in angles:
        for _ in range(per_angle):
            shape_id = int(rng.integers(len(_ROTOR_SHAPES)))
            cx = (size - 1) / 2.0 + rng.uniform(-1.5, 1.5)
            cy = (size - 1) / 2.0 + rng.uniform(-1.5, 1.5)
            scale = rng.uniform(0.85, 1.15)
            intensity = rng.uniform(0.75, 1.0)
            img = render_rotor(theta, shape_id, size, (cx, cy), scale, intensity)
            images.append(to_float(np.clip(np.rint(img * 255), 0, 255).astype(np.uint8))[None])
            labels.append(float(theta))
            tags.append(shape_id)
    return Dataset(
        images=np.stack(images),
        raw_labels=np.array(labels, dtype=np.float64),
        class_tags=np.array(tags, dtype=np.int64),
        provenance={
            "type": "rotor",
            "params": {
                "n_angles": n_angles, "per_angle": per_angle, "size": size,
                "theta_min": theta_min, "theta_max": theta_max,
            },
            "seed": seed,
        },
    )


def make_count_dataset(max_count: int, per_count: int, size: int = 32, seed: int = 0,
                       odd_only: bool = False, overlap: bool = False) -> Dataset:
    """Disk-count dataset: each image holds k disks, label = k >= 1.

    In the default non-overlapping mode, disk centers keep at least a
    1-pixel margin between circles so connected components equal k.
    """
    if max_count < 1:
        raise ValueError(f"max_count must be >= 1, got {max_count}")
    counts = list(range(1, max_count + 1, 2 if odd_only else 1))
    rng = stream(seed, 2)
    images, labels = [], []
    for k in counts:
        for _ in range(per_count):
            images.append(_render_disks(k, size, rng, overlap)[None])
            labels.append(float(k))
    return Dataset(
        images=np.stack(images),
        raw_labels=np.array(labels, dtype=np.float64),
        class_tags=None,
        provenance={
            "type": "count",
            "params": {
                "max_count": max_count, "per_count": per_count, "size": size,
                "odd_only": odd_only, "overlap": overlap,
            },
            "seed": seed,
        },
    )


def _render_disks(k: int, size: int, rng: np.random.Generator,
                  overlap: bool) -> np.ndarray:
    for _ in range(50):
        placed = []
        for _ in range(k):
            ok = False
            for _ in range(200):
                r = rng.uniform(2.0, 3.5)
                cx = rng.uniform(r + 1.0, size - r - 1.0)
                cy = rng.uniform(r + 1.0, size - r - 1.0)
                if overlap or all(
                    math.hypot(cx - px, cy - py) > r + pr + 1.0 for px, py, pr, _ in placed
                ):
                    placed.append((cx, cy, r, rng.uniform(0.75, 1.0)))
                    ok = True
                    break
            if not ok:
                break
        if len(placed) == k:
            break
    else:
        raise ValueError(f"could not place {k} non-overlapping disks in {size}px")
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size))
    for cx, cy, r, inten in placed:
        d = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2) - r
        img = np.maximum(img, np.clip(0.5 - d, 0.0, 1.0) * inten)
    return to_float(np.clip(np.rint(img * 255), 0, 255).astype(np.uint8))
