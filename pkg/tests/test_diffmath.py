import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccdm.diffmath import (
    PredictionType,
    bayes_posterior_oracle,
    cfg_combine,
    convert_prediction,
    ddim_step,
    ddim_subsequence,
    forward_sample,
    posterior_mean,
)
from ccdm.rng import stream
from ccdm.schedule import coefficients_at, make_cosine_schedule

from test_schedule import synthetic_schedule

# alpha_2 = 0.9 on top of abar_1 = 0.5; the worked scalar examples all live here.
S2 = synthetic_schedule([0.5, 0.9])
# abar_1 = 0.64, abar_2 = 0.36.
S_DDIM = synthetic_schedule([0.64, 0.5625])


class TestForwardSample:
    def test_no_noise_at_abar_one(self):
        s = synthetic_schedule([1.0, 0.9])
        x0 = np.array([0.3, -0.7])
        out = forward_sample(x0, 1, np.ones(2), np.array([5.0, -5.0]), s)
        assert np.array_equal(out, x0)

    def test_frozen_scalar(self):
        s = synthetic_schedule([0.64, 0.9])
        out = forward_sample(np.array([1.0]), 1, np.array([1.0]), np.array([0.5]), s)
        assert out[0] == pytest.approx(1.1, rel=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            forward_sample(np.zeros(3), 1, np.ones(2), np.zeros(3), S2)

    def test_empirical_covariance(self):
        # Monte Carlo check of the marginal: Var[x^t] = (1 - abar_t) H.
        s = make_cosine_schedule(50)
        t = 30
        H = np.array([1.0, 0.5, 2.0, 0.25])
        x0 = np.array([1.0, -0.5, 0.8, -1.0])
        rng = stream(1234, 7)
        eps = rng.standard_normal((100_000, 4))
        xt = forward_sample(np.broadcast_to(x0, (100_000, 4)), t, np.broadcast_to(H, (100_000, 4)), eps, s)
        abar = s.alpha_bar(t)
        emp_var = xt.var(axis=0)
        assert np.all(np.abs(emp_var - (1 - abar) * H) <= 0.03 * (1 - abar) * H)
        emp_mean = xt.mean(axis=0)
        assert np.all(np.abs(emp_mean - math.sqrt(abar) * x0) <= 0.01)

    def test_array_t_matches_scalar_t(self):
        s = make_cosine_schedule(20)
        rng = stream(5, 1)
        x0 = rng.standard_normal((3, 1, 4, 4))
        H = rng.uniform(0.5, 2.0, (3, 1, 4, 4))
        eps = rng.standard_normal((3, 1, 4, 4))
        ts = np.array([2, 9, 17])
        batched = forward_sample(x0, ts, H, eps, s)
        for i, t in enumerate(ts):
            single = forward_sample(x0[i], int(t), H[i], eps[i], s)
            assert np.allclose(batched[i], single, atol=1e-14)


class TestPosteriorMean:
    def test_t1_returns_x0(self):
        s = make_cosine_schedule(10)
        x0 = np.array([0.2, -0.4])
        xt = np.array([3.0, -3.0])
        assert np.allclose(posterior_mean(xt, x0, 1, s), x0, atol=1e-14)

    def test_frozen_scalar(self):
        got = posterior_mean(np.array([2.0]), np.array([1.0]), 2, S2)
        assert got[0] == pytest.approx(1.8534435930348518, rel=1e-12)

    def test_linearity_zero(self):
        z = np.zeros(4)
        assert np.array_equal(posterior_mean(z, z, 2, S2), z)

    def test_rejects_bad_t(self):
        with pytest.raises(ValueError):
            posterior_mean(np.zeros(1), np.zeros(1), 3, S2)


class TestBayesPosteriorOracle:
    def test_matches_closed_forms(self):
        rng = stream(42, 3)
        for _ in range(50):
            d = int(rng.integers(1, 9))
            T = int(rng.integers(2, 40))
            s = make_cosine_schedule(T)
            t = int(rng.integers(2, T + 1))
            x0 = rng.standard_normal(d)
            xt = rng.standard_normal(d)
            H = rng.uniform(0.1, 3.0, d)
            mean, var = bayes_posterior_oracle(x0, xt, t, H, s)
            assert np.all(np.abs(mean - posterior_mean(xt, x0, t, s)) <= 1e-10)
            sq2 = coefficients_at(s, t)[3]
            assert np.all(np.abs(var - sq2 * H) <= 1e-10 * np.maximum(sq2 * H, 1e-30))

    def test_t1_degenerate(self):
        s = make_cosine_schedule(10)
        x0 = np.array([0.5, -0.5])
        mean, var = bayes_posterior_oracle(x0, np.array([9.0, 9.0]), 1, np.ones(2), s)
        assert np.array_equal(mean, x0)
        assert np.array_equal(var, np.zeros(2))

    def test_identity_H_is_standard_ddpm_posterior(self):
        # With H = I the posterior variance is the scalar sigma_q^2(t).
        s = make_cosine_schedule(25)
        x0, xt = np.full(3, 0.2), np.full(3, -0.1)
        mean, var = bayes_posterior_oracle(x0, xt, 13, np.ones(3), s)
        assert np.allclose(var, coefficients_at(s, 13)[3], rtol=1e-12)


class TestKlWeightIdentity:
    def test_kl_equals_lambda_t_times_mahalanobis(self):
        # KL between the true and parameterized reverse Gaussians (shared
        # covariance sigma_q^2 H) reduces to lambda_t times the Mahalanobis
        # x0 residual, with lambda_t = abar_{t-1} (1-alpha_t)^2
        # / (2 sigma_q^2 (1-abar_t)^2). The training loss fixes lambda_t = 1.
        rng = stream(7, 11)
        s = make_cosine_schedule(30)
        for _ in range(25):
            t = int(rng.integers(2, 31))
            d = int(rng.integers(1, 6))
            x0 = rng.standard_normal(d)
            x0_hat = rng.standard_normal(d)
            xt = rng.standard_normal(d)
            H = rng.uniform(0.2, 2.0, d)
            alpha_t, abar_t, abar_prev, sq2 = coefficients_at(s, t)
            mu_q = posterior_mean(xt, x0, t, s)
            mu_th = posterior_mean(xt, x0_hat, t, s)
            kl = 0.5 * np.sum((mu_q - mu_th) ** 2 / (sq2 * H))
            lam = abar_prev * (1 - alpha_t) ** 2 / (2 * sq2 * (1 - abar_t) ** 2)
            maha = np.sum((x0_hat - x0) ** 2 / H)
            assert kl == pytest.approx(lam * maha, rel=1e-10)


class TestConvertPrediction:
    def test_frozen_v_and_recovery(self):
        s = synthetic_schedule([0.64, 0.9])
        x0, eps = np.array([1.0]), np.array([0.5])
        xt = forward_sample(x0, 1, np.ones(1), eps, s)
        v = convert_prediction(eps, xt, 1, PredictionType.EPS, PredictionType.V, s)
        assert v[0] == pytest.approx(-0.2, abs=1e-12)
        x0_back = convert_prediction(v, xt, 1, PredictionType.V, PredictionType.X0, s)
        assert x0_back[0] == pytest.approx(1.0, rel=1e-12)

    def test_identity_when_same_type(self):
        x = np.array([0.3])
        assert convert_prediction(x, np.array([1.0]), 1, "x0", "x0", S2) is x

    def test_zero_noise_case(self):
        s = synthetic_schedule([0.64, 0.9])
        x0 = np.array([0.7])
        xt = forward_sample(x0, 1, np.ones(1), np.zeros(1), s)
        v = convert_prediction(np.zeros(1), xt, 1, "eps", "v", s)
        assert v[0] == pytest.approx(-0.6 * 0.7, rel=1e-12)
        back = convert_prediction(v, xt, 1, "v", "x0", s)
        assert back[0] == pytest.approx(0.7, rel=1e-12)

    @pytest.mark.parametrize("src", list(PredictionType))
    @pytest.mark.parametrize("dst", list(PredictionType))
    def test_round_trip_all_pairs(self, src, dst):
        s = make_cosine_schedule(40)
        rng = stream(3, 1)
        pred = rng.standard_normal(6)
        xt = rng.standard_normal(6)
        for t in (1, 17, 40):
            there = convert_prediction(pred, xt, t, src, dst, s)
            back = convert_prediction(there, xt, t, dst, src, s)
            assert np.all(np.abs(back - pred) <= 1e-10)

    def test_consistency_with_forward_algebra(self):
        # Starting from a known (x0, eps) pair, every representation must
        # recover the exact x0.
        s = make_cosine_schedule(40)
        rng = stream(9, 2)
        x0 = rng.standard_normal(5)
        eps_std = rng.standard_normal(5)
        H = rng.uniform(0.3, 2.0, 5)
        t = 23
        xt = forward_sample(x0, t, H, eps_std, s)
        eps = (H**0.5) * eps_std
        got_x0 = convert_prediction(eps, xt, t, "eps", "x0", s)
        assert np.allclose(got_x0, x0, atol=1e-10)
        v = convert_prediction(eps, xt, t, "eps", "v", s)
        assert np.allclose(convert_prediction(v, xt, t, "v", "x0", s), x0, atol=1e-10)

    def test_array_t_matches_scalar(self):
        s = make_cosine_schedule(15)
        rng = stream(11, 4)
        pred = rng.standard_normal((3, 1, 2, 2))
        xt = rng.standard_normal((3, 1, 2, 2))
        ts = np.array([1, 8, 15])
        batched = convert_prediction(pred, xt, ts, "eps", "x0", s)
        for i, t in enumerate(ts):
            single = convert_prediction(pred[i], xt[i], int(t), "eps", "x0", s)
            assert np.allclose(batched[i], single, atol=1e-13)


class TestCfgCombine:
    def test_gamma_one_bit_exact(self):
        rng = stream(21, 0)
        cond, uncond = rng.standard_normal(16), rng.standard_normal(16)
        assert np.array_equal(cfg_combine(cond, uncond, 1.0), cond)

    def test_frozen_scalar(self):
        out = cfg_combine(np.array([2.0]), np.array([1.0]), 1.5)
        assert out[0] == pytest.approx(2.5, rel=1e-15)

    def test_equal_inputs_fixed_point(self):
        x = np.array([0.1, -0.2, 0.9])
        for gamma in (0.0, 0.7, 1.5, 4.0):
            assert np.allclose(cfg_combine(x, x.copy(), gamma), x, atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(gamma=st.floats(-2, 4), scale=st.floats(0.1, 10))
    def test_affine_in_inputs(self, gamma, scale):
        rng = stream(31, 1)
        c, u = rng.standard_normal(4), rng.standard_normal(4)
        a = cfg_combine(scale * c, scale * u, gamma)
        b = scale * cfg_combine(c, u, gamma)
        assert np.allclose(a, b, rtol=1e-10, atol=1e-12)


class TestDdimStep:
    def test_zero_residual(self):
        x0t = np.array([0.4, -0.4])
        xt = math.sqrt(S_DDIM.alpha_bar(2)) * x0t
        out = ddim_step(xt, x0t, 2, 1, S_DDIM)
        assert np.allclose(out, math.sqrt(S_DDIM.alpha_bar(1)) * x0t, atol=1e-15)

    def test_terminal_step_returns_prediction_bit_exact(self):
        rng = stream(41, 2)
        x0t = rng.standard_normal(8)
        xt = rng.standard_normal(8)
        assert np.array_equal(ddim_step(xt, x0t, 1, 0, S_DDIM), x0t)

    def test_frozen_scalar(self):
        out = ddim_step(np.array([1.0]), np.array([1.0]), 2, 1, S_DDIM)
        assert out[0] == pytest.approx(1.1, rel=1e-12)

    def test_rejects_bad_order(self):
        with pytest.raises(ValueError):
            ddim_step(np.zeros(1), np.zeros(1), 1, 1, S_DDIM)
        with pytest.raises(ValueError):
            ddim_step(np.zeros(1), np.zeros(1), 1, -1, S_DDIM)

    def test_oracle_denoiser_chain_exact(self):
        # A constant x0 prediction reaches that constant exactly at t = 0,
        # from any start and over any subsequence.
        target = np.full(4, 0.37)
        for T, Tp in ((50, 5), (50, 50), (200, 7)):
            s = make_cosine_schedule(T)
            ts = ddim_subsequence(T, Tp)
            rng = stream(T, Tp)
            x = rng.standard_normal(4)
            for t, t_prev in zip(ts, list(ts[1:]) + [0]):
                x = ddim_step(x, target, t, t_prev, s)
            assert np.array_equal(x, target)


class TestDdimSubsequence:
    def test_endpoints_and_spacing(self):
        ts = ddim_subsequence(1000, 4)
        assert ts == [1000, 667, 334, 1]

    def test_single_step(self):
        assert ddim_subsequence(1000, 1) == [1000]

    def test_full_chain(self):
        assert ddim_subsequence(10, 10) == list(range(10, 0, -1))

    def test_rejects_bad_T_prime(self):
        with pytest.raises(ValueError):
            ddim_subsequence(10, 0)
        with pytest.raises(ValueError):
            ddim_subsequence(10, 11)

    def test_always_starts_at_T_descending(self):
        for Tp in (1, 2, 3, 17, 250, 999, 1000):
            ts = ddim_subsequence(1000, Tp)
            assert ts[0] == 1000
            assert all(a > b for a, b in zip(ts, ts[1:]))
            assert ts[-1] >= 1


class TestMarginalConsistency:
    def test_composed_transitions_match_closed_form(self):
        # Compose the one-step transitions and compare against the closed
        # form marginal at d=4, T=10, 1e5 chains. Mean tolerance is 1% on
        # the data scale; variance tolerance 3% relative.
        T, n, d = 10, 100_000, 4
        s = make_cosine_schedule(T)
        x0 = np.array([1.0, -0.5, 0.8, -1.0])
        H = np.array([1.0, 0.5, 2.0, 0.25])
        rng = stream(777, 0)
        x = np.broadcast_to(x0, (n, d)).copy()
        sqrtH = np.sqrt(H)
        for t in range(1, T + 1):
            beta = s.beta(t)
            x = math.sqrt(1.0 - beta) * x + math.sqrt(beta) * sqrtH * rng.standard_normal((n, d))
            abar = s.alpha_bar(t)
            want_mean = math.sqrt(abar) * x0
            want_var = (1.0 - abar) * H
            assert np.all(np.abs(x.mean(axis=0) - want_mean) <= 0.01 * np.maximum(1.0, np.abs(want_mean)))
            if 1.0 - abar > 1e-4:
                assert np.all(np.abs(x.var(axis=0) - want_var) <= 0.03 * want_var)
