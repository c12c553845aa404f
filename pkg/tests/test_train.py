import dataclasses
import json

import numpy as np
import pytest
import torch
from torch import nn

from ccdm.denoiser import DenoiserFn, build_unet
from ccdm.diffmath import PredictionType
from ccdm.errors import ConfigError, NumericalFault
from ccdm.labelspace import LabelSpace, build_labelspace
from ccdm.rng import stream
from ccdm.schedule import make_cosine_schedule
from ccdm.train import (
    TrainConfig,
    VicinityMode,
    assemble_batch,
    hvidl_loss,
    train_loop,
)

S20 = make_cosine_schedule(20)
SHAPE = (1, 8, 8)


class _StubNets:
    """Embedding stand-in: constant H, label-valued short embeddings."""

    def __init__(self, image_shape=SHAPE, h_value=1.0):
        self.image_shape = tuple(image_shape)
        self.h_value = h_value
        self.null_short = nn.Parameter(torch.zeros(128))

    def embed_batch(self, y, null_mask=None):
        y = np.asarray(y, dtype=np.float64)
        m = y.shape[0]
        if null_mask is None:
            null_mask = np.zeros(m, dtype=bool)
        h_short = self.null_short.expand(m, 128).clone()
        H = torch.full((m, *self.image_shape), float(self.h_value))
        real = np.flatnonzero(~null_mask)
        if real.size:
            vals = torch.tensor(y[real], dtype=torch.float32)
            h_short[torch.tensor(real)] = vals[:, None].expand(-1, 128)
        H[torch.tensor(null_mask)] = 1.0
        return h_short, H


class _ConstNet(nn.Module):
    """Denoiser stand-in returning a fixed image for every input."""

    def __init__(self, value):
        super().__init__()
        self.register_buffer("value", value)

    def forward(self, x, t, h):
        return self.value.expand(x.shape[0], *self.value.shape[1:]).clone()

    def parameters(self, recurse=True):
        return iter([nn.Parameter(torch.zeros(1))])


def _const_denoiser(value, shape=SHAPE, T=20):
    return DenoiserFn(net=_ConstNet(value), pred_type=PredictionType.X0,
                      image_shape=shape, T=T)


def _toy_dataset(n_labels=5, per_label=1, seed=0):
    rng = np.random.default_rng(seed)
    raw = np.repeat(np.linspace(0.0, 90.0, n_labels), per_label)
    images = rng.uniform(-1, 1, size=(raw.size, *SHAPE)).astype(np.float32)
    return images, raw


def _labelspace_for(raw, m_kappa=2):
    return build_labelspace(raw, m_kappa)


def _manual_batch(x0, H_value=1.0, weights=None, t=None):
    m = x0.shape[0]
    return __import__("ccdm.train", fromlist=["VicinalBatch"]).VicinalBatch(
        images=x0,
        image_labels=np.full(m, 0.5),
        target_labels=np.full(m, 0.5),
        null_mask=np.zeros(m, dtype=bool),
        weights=torch.ones(m, dtype=x0.dtype) if weights is None else weights,
        timesteps=np.full(m, 7) if t is None else t,
        h_short=torch.zeros(m, 128, dtype=x0.dtype),
        H_diags=torch.full(x0.shape, float(H_value), dtype=x0.dtype),
        delta_raw=np.zeros(m),
    )


class TestTrainConfig:
    def test_p_drop_default(self):
        assert TrainConfig().p_drop == 0.1

    def test_lr_default(self):
        assert TrainConfig().lr == 1e-4

    def test_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            TrainConfig(steps=-1)
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)
        with pytest.raises(ConfigError):
            TrainConfig(p_drop=1.5)
        with pytest.raises(ConfigError):
            TrainConfig(lr=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(retry_limit=0)

    def test_mode_and_pred_type_coerce_from_strings(self):
        cfg = TrainConfig(vicinity_mode="soft", pred_type="eps")
        assert cfg.vicinity_mode is VicinityMode.SOFT
        assert cfg.pred_type is PredictionType.EPS


class TestAssembleBatch:
    def test_p_drop_zero_keeps_all_conditions(self):
        images, raw = _toy_dataset()
        ls = _labelspace_for(raw)
        cfg = TrainConfig(batch_size=64, p_drop=0.0)
        batch = assemble_batch(images, ls.labels, ls, _StubNets(), cfg, 20, stream(1, 0))
        assert not batch.null_mask.any()

    def test_p_drop_one_drops_everything_with_identity_H(self):
        images, raw = _toy_dataset()
        ls = _labelspace_for(raw)
        cfg = TrainConfig(batch_size=32, p_drop=1.0)
        nets = _StubNets(h_value=0.25)
        batch = assemble_batch(images, ls.labels, ls, nets, cfg, 20, stream(1, 0))
        assert batch.null_mask.all()
        assert torch.all(batch.H_diags == 1.0)
        assert torch.all(batch.weights == 1.0)

    def test_exact_match_when_kappa_zero_and_tiny_sigma(self):
        images, raw = _toy_dataset(n_labels=5, per_label=1)
        ls = dataclasses.replace(
            build_labelspace(raw, m_kappa=0), sigma_delta=1e-300)
        cfg = TrainConfig(batch_size=200, p_drop=0.0)
        batch = assemble_batch(images, ls.labels, ls, _StubNets(), cfg, 20, stream(2, 0))
        assert batch.fallback_count == 0
        np.testing.assert_array_equal(batch.image_labels, batch.target_labels)

    def test_hard_mode_rows_always_satisfy_kappa(self):
        images, raw = _toy_dataset(n_labels=30, per_label=3, seed=4)
        ls = _labelspace_for(raw, m_kappa=1)
        cfg = TrainConfig(batch_size=64, p_drop=0.1)
        rng = stream(3, 0)
        for _ in range(20):
            batch = assemble_batch(images, ls.labels, ls, _StubNets(), cfg, 20, rng)
            assert batch.fallback_count == 0
            assert np.all(np.abs(batch.image_labels - batch.target_labels)
                          <= ls.kappa + 1e-15)
            assert np.all((batch.weights.numpy() == 1.0))

    def test_drop_frequency_matches_p_drop(self):
        images, raw = _toy_dataset()
        ls = _labelspace_for(raw)
        cfg = TrainConfig(batch_size=100, p_drop=0.1)
        rng = stream(5, 0)
        dropped = 0
        for _ in range(100):
            batch = assemble_batch(images, ls.labels, ls, _StubNets(), cfg, 20, rng)
            dropped += int(batch.null_mask.sum())
        assert abs(dropped / 10_000 - 0.1) <= 0.02

    def test_delta_std_matches_sigma(self):
        images, raw = _toy_dataset(n_labels=20, per_label=2, seed=6)
        ls = _labelspace_for(raw, m_kappa=3)
        cfg = TrainConfig(batch_size=100, p_drop=0.0)
        rng = stream(6, 0)
        deltas = []
        for _ in range(100):
            batch = assemble_batch(images, ls.labels, ls, _StubNets(), cfg, 20, rng)
            assert batch.fallback_count == 0  # draws are first-attempt, unbiased
            deltas.append(batch.delta_raw)
        std = np.concatenate(deltas).std()
        assert abs(std - ls.sigma_delta) / ls.sigma_delta <= 0.05

    def test_soft_mode_weights_are_exponential_kernel(self):
        images, raw = _toy_dataset(n_labels=10, per_label=2, seed=7)
        ls = _labelspace_for(raw, m_kappa=2)
        cfg = TrainConfig(batch_size=64, p_drop=0.0, vicinity_mode=VicinityMode.SOFT)
        batch = assemble_batch(images, ls.labels, ls, _StubNets(), cfg, 20, stream(7, 0))
        expect = np.exp(-ls.nu * (batch.image_labels - batch.target_labels) ** 2)
        np.testing.assert_allclose(batch.weights.numpy(), expect, rtol=1e-6)

    def test_soft_mode_rejected_when_kappa_zero(self):
        images, raw = _toy_dataset()
        ls = build_labelspace(raw, m_kappa=0)
        cfg = TrainConfig(vicinity_mode=VicinityMode.SOFT)
        with pytest.raises(ConfigError, match="kappa"):
            assemble_batch(images, ls.labels, ls, _StubNets(), cfg, 20, stream(1, 0))

    def test_rejects_empty_dataset(self):
        _, raw = _toy_dataset()
        ls = _labelspace_for(raw)
        with pytest.raises(ValueError, match="empty"):
            assemble_batch(np.zeros((0, *SHAPE), dtype=np.float32), np.zeros(0),
                           ls, _StubNets(), TrainConfig(), 20, stream(1, 0))

    def test_timesteps_cover_range_uniformly(self):
        images, raw = _toy_dataset()
        ls = _labelspace_for(raw)
        cfg = TrainConfig(batch_size=500, p_drop=0.0)
        batch = assemble_batch(images, ls.labels, ls, _StubNets(), cfg, 20, stream(9, 0))
        assert batch.timesteps.min() >= 1 and batch.timesteps.max() <= 20
        counts = np.bincount(batch.timesteps, minlength=21)[1:]
        assert (counts > 0).sum() >= 18  # all 20 bins essentially hit


class TestHvidlLoss:
    def test_oracle_prediction_gives_zero_loss(self):
        rng = np.random.default_rng(0)
        x0 = torch.tensor(rng.uniform(-1, 1, size=(4, *SHAPE)))
        batch = _manual_batch(x0, H_value=0.7)

        class _Echo(nn.Module):
            def forward(self, x, t, h):
                return x0

        f = DenoiserFn(net=_Echo(), pred_type=PredictionType.X0, image_shape=SHAPE, T=20)
        loss = hvidl_loss(f, batch, S20, stream(0, 0))
        assert float(loss) == 0.0

    def test_identity_H_unit_weights_reduce_to_mse(self):
        rng = np.random.default_rng(1)
        x0 = torch.tensor(rng.uniform(-1, 1, size=(3, *SHAPE)))
        const = torch.tensor(rng.uniform(-1, 1, size=(1, *SHAPE)))
        batch = _manual_batch(x0, H_value=1.0)
        f = _const_denoiser(const)
        loss = float(hvidl_loss(f, batch, S20, stream(0, 0)))
        expect = float(((const - x0) ** 2).flatten(1).sum(dim=1).mean())
        assert loss == pytest.approx(expect, rel=1e-10)

    def test_half_H_doubles_identity_loss(self):
        rng = np.random.default_rng(2)
        x0 = torch.tensor(rng.uniform(-1, 1, size=(3, *SHAPE)))
        const = torch.tensor(rng.uniform(-1, 1, size=(1, *SHAPE)))
        f = _const_denoiser(const)
        loss_1 = float(hvidl_loss(f, _manual_batch(x0, H_value=1.0), S20, stream(0, 0)))
        loss_half = float(hvidl_loss(f, _manual_batch(x0, H_value=0.5), S20, stream(0, 0)))
        assert loss_half == pytest.approx(2.0 * loss_1, rel=1e-12)

    def test_weights_scale_rows(self):
        rng = np.random.default_rng(3)
        x0 = torch.tensor(rng.uniform(-1, 1, size=(2, *SHAPE)))
        const = torch.tensor(rng.uniform(-1, 1, size=(1, *SHAPE)))
        f = _const_denoiser(const)
        w = torch.tensor([1.0, 0.0], dtype=torch.float64)
        loss_w = float(hvidl_loss(f, _manual_batch(x0, weights=w), S20, stream(0, 0)))
        per_row = ((const - x0) ** 2).flatten(1).sum(dim=1)
        assert loss_w == pytest.approx(float(per_row[0]) / 2.0, rel=1e-10)

    def test_nonfinite_prediction_names_the_row(self):
        x0 = torch.zeros((3, *SHAPE), dtype=torch.float64)
        bad = torch.full((1, *SHAPE), torch.inf, dtype=torch.float64)
        f = _const_denoiser(bad)
        with pytest.raises(NumericalFault, match="row 0"):
            hvidl_loss(f, _manual_batch(x0), S20, stream(0, 0))

    def test_eps_parameterization_runs_and_is_finite(self):
        rng = np.random.default_rng(4)
        x0 = torch.tensor(rng.uniform(-1, 1, size=(2, *SHAPE)))
        const = torch.tensor(rng.uniform(-0.1, 0.1, size=(1, *SHAPE)))
        f = _const_denoiser(const)
        f.pred_type = PredictionType.EPS
        loss = hvidl_loss(f, _manual_batch(x0), S20, stream(1, 0))
        assert torch.isfinite(loss)

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(11)
        f = build_unet(SHAPE, base_channels=16, channel_mults=(1, 2),
                       num_res_blocks=1, T=20)
        f.net.double()
        with torch.no_grad():
            f.net.out_conv.weight.normal_(0, 0.05)
        rng = np.random.default_rng(12)
        x0 = torch.tensor(rng.uniform(-1, 1, size=(2, *SHAPE)))
        batch = _manual_batch(x0, H_value=0.8, t=np.array([5, 17]))
        loss = hvidl_loss(f, batch, S20, stream(13, 0))
        loss.backward()
        probes = [
            (f.net.out_conv.weight, (0, 0, 1, 1)),
            (f.net.stem.weight, (3, 0, 0, 0)),
            (f.net.mid1.conv1.weight, (2, 1, 0, 2)),
        ]
        eps = 1e-6
        for param, idx in probes:
            grad = param.grad[idx].item()
            with torch.no_grad():
                orig = param[idx].item()
                param[idx] = orig + eps
                up = float(hvidl_loss(f, batch, S20, stream(13, 0)))
                param[idx] = orig - eps
                down = float(hvidl_loss(f, batch, S20, stream(13, 0)))
                param[idx] = orig
            fd = (up - down) / (2 * eps)
            assert grad == pytest.approx(fd, rel=1e-3, abs=1e-12)


class TestTrainLoop:
    def _single_image_setup(self, seed=0):
        rng = np.random.default_rng(seed)
        images = rng.uniform(-1, 1, size=(1, *SHAPE)).astype(np.float32)
        labels = np.array([0.5])
        ls = LabelSpace(raw_min=0.0, raw_max=1.0, labels=labels,
                        distinct=np.array([0.5]), sigma_delta=0.05,
                        kappa_base=0.0, m_kappa=0, kappa=0.0, nu=None)
        return images, labels, ls

    def test_zero_steps_is_noop(self):
        images, labels, ls = self._single_image_setup()
        torch.manual_seed(0)
        f = build_unet(SHAPE, base_channels=16, channel_mults=(1, 2),
                       num_res_blocks=1, T=20)
        before = {k: v.clone() for k, v in f.net.state_dict().items()}
        cfg = TrainConfig(steps=0, vicinity_mode=VicinityMode.NONE)
        f2, trace = train_loop(f, images, labels, ls, _StubNets(), S20, cfg)
        assert f2 is f
        assert trace == []
        for k, v in f.net.state_dict().items():
            assert torch.equal(before[k], v)

    def test_memorizes_single_image(self):
        images, labels, ls = self._single_image_setup(seed=3)
        torch.manual_seed(1)
        f = build_unet(SHAPE, base_channels=16, channel_mults=(1, 2),
                       num_res_blocks=1, T=20)
        cfg = TrainConfig(steps=500, batch_size=4, p_drop=0.0,
                          vicinity_mode=VicinityMode.NONE, lr=1e-3, seed=5)
        f, trace = train_loop(f, images, labels, ls, _StubNets(), S20, cfg)
        initial = trace[0].loss
        final = np.mean([r.loss for r in trace[-10:]])
        assert final < 0.01 * initial

    def test_soft_eps_variant_runs(self):
        images, raw = _toy_dataset(n_labels=5, per_label=2, seed=8)
        ls = _labelspace_for(raw, m_kappa=2)
        torch.manual_seed(2)
        f = build_unet(SHAPE, base_channels=16, channel_mults=(1, 2),
                       num_res_blocks=1, pred_type=PredictionType.EPS, T=20)
        cfg = TrainConfig(steps=3, batch_size=8, vicinity_mode=VicinityMode.SOFT,
                          pred_type=PredictionType.EPS, seed=6)
        f, trace = train_loop(f, images, ls.labels, ls, _StubNets(), S20, cfg)
        assert len(trace) == 3
        assert all(np.isfinite(r.loss) for r in trace)

    def test_soft_mode_with_zero_kappa_rejected(self):
        images, raw = _toy_dataset()
        ls = build_labelspace(raw, m_kappa=0)
        f = build_unet(SHAPE, base_channels=16, channel_mults=(1, 2),
                       num_res_blocks=1, T=20)
        cfg = TrainConfig(steps=1, vicinity_mode=VicinityMode.SOFT)
        with pytest.raises(ConfigError, match="kappa"):
            train_loop(f, images, ls.labels, ls, _StubNets(), S20, cfg)

    def test_trace_file_is_bit_reproducible(self, tmp_path):
        images, raw = _toy_dataset(n_labels=5, per_label=2, seed=9)
        ls = _labelspace_for(raw, m_kappa=2)
        paths = []
        for run in range(2):
            torch.manual_seed(7)
            f = build_unet(SHAPE, base_channels=16, channel_mults=(1, 2),
                           num_res_blocks=1, T=20)
            cfg = TrainConfig(steps=5, batch_size=8, seed=11)
            p = tmp_path / f"trace_{run}.ndjson"
            train_loop(f, images, ls.labels, ls, _StubNets(), S20, cfg, trace_path=p)
            paths.append(p.read_bytes())
        assert paths[0] == paths[1]
        lines = paths[0].decode().strip().split("\n")
        assert len(lines) == 5
        rec = json.loads(lines[0])
        assert set(rec) == {"step", "loss", "drop_fraction", "fallback_count"}

    def test_checkpoints_written_at_interval(self, tmp_path):
        images, raw = _toy_dataset(n_labels=5, per_label=2, seed=10)
        ls = _labelspace_for(raw, m_kappa=2)
        torch.manual_seed(8)
        f = build_unet(SHAPE, base_channels=16, channel_mults=(1, 2),
                       num_res_blocks=1, T=20)
        cfg = TrainConfig(steps=4, batch_size=8, seed=12, checkpoint_every=2)
        train_loop(f, images, ls.labels, ls, _StubNets(), S20, cfg, out_dir=tmp_path)
        assert (tmp_path / "ckpt_0000002.pt").exists()
        assert (tmp_path / "model.pt").exists()
        assert f.trained_p_drop == cfg.p_drop

    def test_persistent_nonfinite_loss_aborts(self):
        images, labels, ls = self._single_image_setup()

        class _NanNet(nn.Module):
            def __init__(self):
                super().__init__()
                self.p = nn.Parameter(torch.zeros(1))

            def forward(self, x, t, h):
                return torch.full_like(x, torch.nan) + self.p

        f = DenoiserFn(net=_NanNet(), pred_type=PredictionType.X0,
                       image_shape=SHAPE, T=20)
        cfg = TrainConfig(steps=2, batch_size=2, vicinity_mode=VicinityMode.NONE)
        with pytest.raises(NumericalFault):
            train_loop(f, images, labels, ls, _StubNets(), S20, cfg)
