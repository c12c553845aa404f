import numpy as np
import pytest
import torch

from ccdm.denoiser import DenoiserFn, UNet, build_unet, load_denoiser, predict, save_denoiser
from ccdm.diffmath import PredictionType
from ccdm.embednet import SHORT_DIM
from ccdm.errors import MissingArtifactError

SHAPE = (1, 16, 16)


def _small(pred_type=PredictionType.X0, seed=0):
    torch.manual_seed(seed)
    return build_unet(SHAPE, base_channels=16, channel_mults=(1, 2),
                      num_res_blocks=1, pred_type=pred_type, T=100)


def _inputs(b=2, seed=0):
    torch.manual_seed(seed + 1000)
    xt = torch.randn(b, *SHAPE)
    h_short = torch.randn(b, SHORT_DIM)
    return xt, h_short


class TestBuildUnet:
    def test_forward_preserves_shape(self):
        torch.manual_seed(0)
        f = build_unet((1, 32, 32), base_channels=16, channel_mults=(1, 2, 4),
                       num_res_blocks=1, T=50)
        xt = torch.randn(3, 1, 32, 32)
        out = predict(f, xt, 7, torch.randn(3, SHORT_DIM))
        assert out.shape == xt.shape

    def test_rejects_indivisible_shape(self):
        with pytest.raises(ValueError, match="divisible"):
            build_unet((1, 10, 10), base_channels=16, channel_mults=(1, 2, 4))

    def test_parameter_count_deterministic(self):
        count = lambda f: sum(p.numel() for p in f.parameters())
        assert count(_small(seed=0)) == count(_small(seed=99))

    def test_zeroed_skips_still_shape_correct(self):
        f = _small()
        xt, hs = _inputs(b=2)
        f.net._zero_skips = True
        out = predict(f, xt, 5, hs)
        assert out.shape == xt.shape
        assert torch.isfinite(out).all()

    def test_defaults_match_desk_scale(self):
        import inspect
        sig = inspect.signature(build_unet)
        assert sig.parameters["base_channels"].default == 64
        assert sig.parameters["channel_mults"].default == (1, 2, 4)
        assert sig.parameters["num_res_blocks"].default == 2


class TestPredict:
    def test_untrained_output_is_zero(self):
        f = _small()
        xt, hs = _inputs(b=2)
        out = predict(f, xt, 3, hs)
        assert torch.all(out == 0.0)

    def test_gradient_matches_central_finite_differences(self):
        f = _small(seed=4)
        f.net.double()
        # nonzero output head so the probe actually sees signal
        torch.manual_seed(5)
        with torch.no_grad():
            f.net.out_conv.weight.normal_(0, 0.05)
            f.net.out_conv.bias.normal_(0, 0.05)
        torch.manual_seed(6)
        xt = torch.randn(1, *SHAPE, dtype=torch.float64, requires_grad=True)
        hs = torch.randn(1, SHORT_DIM, dtype=torch.float64)
        predict(f, xt, 9, hs).sum().backward()
        grad = xt.grad[0, 0, 7, 3].item()
        eps = 1e-5
        with torch.no_grad():
            for sign in (+1, -1):
                bumped = xt.detach().clone()
                bumped[0, 0, 7, 3] += sign * eps
                if sign > 0:
                    up = predict(f, bumped, 9, hs).sum().item()
                else:
                    down = predict(f, bumped, 9, hs).sum().item()
        fd = (up - down) / (2 * eps)
        assert grad == pytest.approx(fd, rel=1e-3)

    def test_conditional_and_null_paths_share_entry_point(self):
        f = _small(seed=2)
        with torch.no_grad():
            f.net.out_conv.weight.normal_(0, 0.1)
        xt, _ = _inputs(b=1)
        null_vec = torch.zeros(SHORT_DIM)
        cond_vec = torch.full((SHORT_DIM,), 0.8)
        out_null = predict(f, xt, 5, null_vec)
        out_cond = predict(f, xt, 5, cond_vec)
        assert out_null.shape == out_cond.shape == xt.shape
        assert not torch.equal(out_null, out_cond)

    def test_rejects_shape_mismatch(self):
        f = _small()
        with pytest.raises(ValueError, match="shape"):
            predict(f, torch.randn(1, 1, 8, 8), 5, torch.zeros(SHORT_DIM))

    def test_rejects_t_out_of_range(self):
        f = _small()
        xt, hs = _inputs(b=1)
        with pytest.raises(ValueError, match="range"):
            predict(f, xt, 0, hs[:1])
        with pytest.raises(ValueError, match="range"):
            predict(f, xt, 101, hs[:1])

    def test_per_row_timesteps_match_scalar_calls(self):
        f = _small(seed=3)
        with torch.no_grad():
            f.net.out_conv.weight.normal_(0, 0.1)
        xt, hs = _inputs(b=2, seed=8)
        both = predict(f, xt, np.array([4, 90]), hs)
        one = predict(f, xt[:1], 4, hs[:1])
        two = predict(f, xt[1:], 90, hs[1:])
        assert torch.allclose(both[0], one[0], atol=1e-5)
        assert torch.allclose(both[1], two[0], atol=1e-5)

    def test_shape_and_finiteness_across_seeds(self):
        for seed in range(100):
            torch.manual_seed(seed)
            xt = torch.randn(1, *SHAPE) * (1 + seed % 5)
            hs = torch.randn(1, SHORT_DIM)
            out = predict(_SMALL_SHARED, xt, 1 + seed % 100, hs)
            assert out.shape == xt.shape
            assert torch.isfinite(out).all()

    def test_inference_determinism(self):
        f = _small(seed=7)
        with torch.no_grad():
            f.net.out_conv.weight.normal_(0, 0.1)
        xt, hs = _inputs(b=2, seed=11)
        a = predict(f, xt, 42, hs)
        b = predict(f, xt, 42, hs)
        assert torch.equal(a, b)


_SMALL_SHARED = _small(seed=12)
with torch.no_grad():
    _SMALL_SHARED.net.out_conv.weight.normal_(0, 0.1)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        f = _small(seed=9)
        with torch.no_grad():
            f.net.out_conv.weight.normal_(0, 0.1)
        f.trained_p_drop = 0.1
        null = torch.randn(SHORT_DIM)
        p = tmp_path / "model.pt"
        save_denoiser(f, p, schedule_meta={"T": 100, "s_offset": 0.008, "beta_clip": 0.999},
                      labelspace_meta={"raw_min": 0.0, "raw_max": 90.0},
                      null_short=null)
        back, meta, null_back = load_denoiser(p)
        assert meta["pred_type"] == "x0"
        assert meta["trained_p_drop"] == 0.1
        assert meta["schedule"]["T"] == 100
        assert meta["labelspace"]["raw_max"] == 90.0
        assert torch.equal(null_back, null)
        assert (p.with_suffix(".json")).exists()
        xt, hs = _inputs(b=2, seed=13)
        assert torch.equal(predict(f, xt, 10, hs), predict(back, xt, 10, hs))

    def test_missing_checkpoint_raises(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            load_denoiser(tmp_path / "absent.pt")

    def test_pred_type_round_trips_for_eps(self, tmp_path):
        f = _small(pred_type=PredictionType.EPS, seed=1)
        p = tmp_path / "eps.pt"
        save_denoiser(f, p, schedule_meta={}, labelspace_meta={})
        back, _, null_back = load_denoiser(p)
        assert back.pred_type is PredictionType.EPS
        assert null_back is None
