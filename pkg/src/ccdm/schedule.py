"""Variance schedule and the diffusion coefficients derived from it.

The schedule is the cosine one: f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)
with offset s = 0.008, abar_t = f(t)/f(0), and beta_t = 1 - abar_t/abar_{t-1}
clipped to [0, 0.999]. Everything is computed once in double precision and
frozen; abar_0 = 1 is stored explicitly so t=1 posterior formulas need no
special casing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

COSINE_OFFSET = 0.008
BETA_CLIP = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable coefficient tables for a T-step diffusion.

    betas[i] is beta_{i+1} (length T); alpha_bars[t] is abar_t with the
    abar_0 = 1 convention (length T+1). alpha_bars is the running product
    of alphas, so alpha_bars[t] == alphas[t-1] * alpha_bars[t-1] exactly.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise ValueError(f"t={t} outside [0, {self.T}]")
        return float(self.alpha_bars[t])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"t={t} outside [1, {self.T}]")

    def meta(self) -> dict:
        """Checkpoint metadata; arrays are recomputed on load."""
        return {"T": self.T, "s_offset": COSINE_OFFSET, "beta_clip": BETA_CLIP}


def make_cosine_schedule(T: int) -> NoiseSchedule:
    """Build the cosine schedule for T steps. Deterministic and bit-stable."""
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * math.pi / 2.0) ** 2
    abar_raw = f / f[0]
    betas = np.clip(1.0 - abar_raw[1:] / abar_raw[:-1], 0.0, BETA_CLIP)
    alphas = 1.0 - betas
    # Sequential product keeps abar_t == alpha_t * abar_{t-1} exact in floats.
    alpha_bars = np.concatenate(([1.0], np.cumprod(alphas)))
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def schedule_from_meta(meta: dict) -> NoiseSchedule:
    if meta.get("s_offset") != COSINE_OFFSET or meta.get("beta_clip") != BETA_CLIP:
        raise ValueError(f"unsupported schedule metadata: {meta}")
    return make_cosine_schedule(int(meta["T"]))


def coefficients_at(s: NoiseSchedule, t: int) -> tuple[float, float, float, float]:
    """Return (alpha_t, abar_t, abar_{t-1}, sigma_q^2(t)).

    sigma_q^2(t) = (1 - alpha_t)(1 - abar_{t-1}) / (1 - abar_t) is the
    scalar factor of the reverse-posterior covariance; it is 0 at t=1.
    """
    s._check_t(t)
    alpha_t = float(s.alphas[t - 1])
    abar_t = float(s.alpha_bars[t])
    abar_prev = float(s.alpha_bars[t - 1])
    sigma_q2 = (1.0 - alpha_t) * (1.0 - abar_prev) / (1.0 - abar_t)
    return alpha_t, abar_t, abar_prev, sigma_q2
