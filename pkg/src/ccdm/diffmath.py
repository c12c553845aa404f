"""Closed-form diffusion math: forward sampling, the reverse posterior,
prediction-type conversions, guidance combination, and the DDIM step.

Everything here is pure arithmetic on arrays. Scalar schedule coefficients
are looked up as Python floats and broadcast, so every operation works
unchanged on numpy arrays and torch tensors (elementwise sqrt is written
as ** 0.5 for that reason). The label-dependent covariance enters only
through its diagonal H_diag, always in reparameterized form:
eps = sqrt(H_diag) * eps_std with eps_std standard normal.
"""

from __future__ import annotations

import enum
import math

import numpy as np

from .schedule import NoiseSchedule, coefficients_at


class PredictionType(str, enum.Enum):
    X0 = "x0"
    EPS = "eps"
    V = "v"


def _check_same_shape(*arrays) -> None:
    shapes = {tuple(a.shape) for a in arrays}
    if len(shapes) > 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def _abar_coeffs(s: NoiseSchedule, t):
    """sqrt(abar_t) and sqrt(1 - abar_t), for scalar t or a per-row array.

    Array t returns numpy columns reshaped for broadcasting over (m, ...)
    batches; scalar t returns floats.
    """
    if np.ndim(t) == 0:
        abar = s.alpha_bar(int(t))
        return math.sqrt(abar), math.sqrt(1.0 - abar)
    t = np.asarray(t)
    if t.min() < 1 or t.max() > s.T:
        raise ValueError(f"t outside [1, {s.T}]")
    abar = s.alpha_bars[t]
    shape = (len(t),) + (1,) * 3
    return np.sqrt(abar).reshape(shape), np.sqrt(1.0 - abar).reshape(shape)


def _as_coeff(c, like):
    """Move a numpy broadcast coefficient onto torch if `like` is a tensor."""
    if isinstance(c, float) or isinstance(like, np.ndarray):
        return c
    import torch

    if isinstance(like, torch.Tensor):
        return torch.as_tensor(c, dtype=like.dtype, device=like.device)
    return c


def forward_sample(x0, t, H_diag, eps_std, s: NoiseSchedule):
    """x^t = sqrt(abar_t) x^0 + sqrt(1 - abar_t) sqrt(H_diag) * eps_std.

    t may be a scalar or a per-row array matching the leading batch axis.
    """
    _check_same_shape(x0, H_diag, eps_std)
    sa, sb = _abar_coeffs(s, t)
    sa, sb = _as_coeff(sa, x0), _as_coeff(sb, x0)
    return sa * x0 + sb * (H_diag**0.5) * eps_std


def posterior_mean(xt, x0, t: int, s: NoiseSchedule):
    """Mean of q(x^{t-1} | x^t, x^0, y); free of H_y.

    [sqrt(alpha_t)(1 - abar_{t-1}) x^t + sqrt(abar_{t-1})(1 - alpha_t) x^0]
    / (1 - abar_t).
    """
    alpha_t, abar_t, abar_prev, _ = coefficients_at(s, t)
    c_xt = math.sqrt(alpha_t) * (1.0 - abar_prev) / (1.0 - abar_t)
    c_x0 = math.sqrt(abar_prev) * (1.0 - alpha_t) / (1.0 - abar_t)
    return c_xt * xt + c_x0 * x0


def bayes_posterior_oracle(x0, xt, t: int, H_diag, s: NoiseSchedule):
    """Posterior of x^{t-1} by explicit per-coordinate Gaussian products.

    Combines the one-step transition x^t | x^{t-1} ~ N(sqrt(alpha_t) x^{t-1},
    beta_t H) with the marginal x^{t-1} | x^0 ~ N(sqrt(abar_{t-1}) x^0,
    (1 - abar_{t-1}) H) and conjugates directly. Test oracle only: the
    closed forms above must reproduce its (mean, var) output.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    xt = np.asarray(xt, dtype=np.float64)
    H = np.asarray(H_diag, dtype=np.float64)
    _check_same_shape(x0, xt, H)
    alpha_t, _, abar_prev, _ = coefficients_at(s, t)
    beta_t = 1.0 - alpha_t
    if t == 1:
        # abar_0 = 1: the marginal for x^0 is degenerate, posterior is a point.
        return x0.copy(), np.zeros_like(x0)
    m1 = math.sqrt(abar_prev) * x0
    v1 = (1.0 - abar_prev) * H
    # Transition read as a Gaussian in x^{t-1}.
    m2 = xt / math.sqrt(alpha_t)
    v2 = beta_t * H / alpha_t
    var = 1.0 / (1.0 / v1 + 1.0 / v2)
    mean = var * (m1 / v1 + m2 / v2)
    return mean, var


# Each conversion is linear: out = a * pred + b * xt, with a, b functions of
# sqrt(abar_t) =: sa and sqrt(1 - abar_t) =: sb.
_CONVERSIONS = {
    (PredictionType.EPS, PredictionType.X0): lambda sa, sb: (-sb / sa, 1.0 / sa),
    (PredictionType.X0, PredictionType.EPS): lambda sa, sb: (-sa / sb, 1.0 / sb),
    (PredictionType.X0, PredictionType.V): lambda sa, sb: (-1.0 / sb, sa / sb),
    (PredictionType.V, PredictionType.X0): lambda sa, sb: (-sb, sa),
    (PredictionType.EPS, PredictionType.V): lambda sa, sb: (1.0 / sa, -sb / sa),
    (PredictionType.V, PredictionType.EPS): lambda sa, sb: (sa, sb),
}


def convert_prediction(pred, xt, t, from_type: PredictionType, to_type: PredictionType,
                       s: NoiseSchedule):
    """Convert between x0-, eps-, and v-parameterizations of a prediction.

    The relations are per-coordinate algebra on x^t = sqrt(abar) x^0 +
    sqrt(1-abar) eps and v = sqrt(abar) eps - sqrt(1-abar) x^0; they hold
    regardless of the noise covariance. Round trips are identities.
    t may be a scalar or a per-row array.
    """
    from_type, to_type = PredictionType(from_type), PredictionType(to_type)
    _check_same_shape(pred, xt)
    if from_type == to_type:
        return pred
    sa, sb = _abar_coeffs(s, t)
    a, b = _CONVERSIONS[(from_type, to_type)](sa, sb)
    return _as_coeff(a, pred) * pred + _as_coeff(b, pred) * xt


def cfg_combine(x0_cond, x0_uncond, gamma: float):
    """gamma * x0_cond + (1 - gamma) * x0_uncond.

    Written in that order so gamma = 1 returns x0_cond bit-exactly.
    """
    _check_same_shape(x0_cond, x0_uncond)
    return gamma * x0_cond + (1.0 - gamma) * x0_uncond


def ddim_step(xt, x0_tilde, t: int, t_prev: int, s: NoiseSchedule):
    """Deterministic DDIM update from t to t_prev < t.

    sqrt(abar_{t_prev}) x0_tilde
      + sqrt(1 - abar_{t_prev}) (x^t - sqrt(abar_t) x0_tilde) / sqrt(1 - abar_t).
    """
    if t_prev >= t:
        raise ValueError(f"t_prev={t_prev} must be < t={t}")
    if t_prev < 0:
        raise ValueError(f"t_prev={t_prev} must be >= 0")
    abar_t = s.alpha_bar(t)
    abar_prev = s.alpha_bar(t_prev)
    if abar_t >= 1.0:
        raise ValueError(f"abar_t=1 at t={t}: zero noise level, step undefined")
    _check_same_shape(xt, x0_tilde)
    c_resid = math.sqrt(1.0 - abar_prev) / math.sqrt(1.0 - abar_t)
    return (
        math.sqrt(abar_prev) * x0_tilde
        + c_resid * (xt - math.sqrt(abar_t) * x0_tilde)
    )


def ddim_subsequence(T: int, T_prime: int) -> list[int]:
    """T_prime time indices uniformly spaced over [1, T], descending,
    always starting at T; the chain's final transition then targets 0.

    Rounding can merge adjacent indices for T_prime close to T, in which
    case fewer than T_prime distinct steps are returned.
    """
    if not 1 <= T_prime <= T:
        raise ValueError(f"T_prime={T_prime} outside [1, {T}]")
    ts = np.linspace(T, 1, T_prime)
    ts = np.unique(np.rint(ts).astype(int))[::-1]
    return [int(t) for t in ts]
