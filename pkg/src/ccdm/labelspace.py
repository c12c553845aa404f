"""Label normalization, vicinity hyperparameters, and vicinal weights.

Regression labels are min-max normalized into [0, 1]. The vicinity
hyperparameters follow the rule of thumb: sigma_delta is the KDE
rule-of-thumb bandwidth (4 sigma_hat^5 / (3N))^(1/5), kappa_base is the
largest gap between consecutive distinct normalized labels, kappa =
m_kappa * kappa_base, and nu = 1/kappa^2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LabelSpace:
    """Normalized labels plus the vicinity parameters derived from them.

    kappa may be 0 (m_kappa = 0 disables the vicinity); nu is then None
    and soft mode must be rejected at config validation.
    """

    raw_min: float
    raw_max: float
    labels: np.ndarray
    distinct: np.ndarray
    sigma_delta: float | None = None
    kappa_base: float | None = None
    m_kappa: int | None = None
    kappa: float | None = None
    nu: float | None = None

    def denormalize(self, y):
        return y * (self.raw_max - self.raw_min) + self.raw_min

    def normalize(self, raw):
        return (raw - self.raw_min) / (self.raw_max - self.raw_min)

    def meta(self) -> dict:
        """Checkpoint metadata."""
        return {
            "raw_min": self.raw_min,
            "raw_max": self.raw_max,
            "sigma_delta": self.sigma_delta,
            "m_kappa": self.m_kappa,
            "kappa": self.kappa,
            "nu": self.nu,
            "N": int(self.labels.size),
            "N_distinct": int(self.distinct.size),
        }


def normalize_labels(raw_labels: np.ndarray) -> LabelSpace:
    """Min-max normalize raw labels into [0, 1], keeping bounds for round trip."""
    raw = np.asarray(raw_labels, dtype=np.float64)
    if raw.size < 2:
        raise ValueError(f"need at least 2 labels, got {raw.size}")
    raw_min, raw_max = float(raw.min()), float(raw.max())
    if raw_max <= raw_min:
        raise ValueError("constant label array: degenerate range")
    labels = (raw - raw_min) / (raw_max - raw_min)
    distinct = np.unique(labels)
    labels.setflags(write=False)
    distinct.setflags(write=False)
    return LabelSpace(raw_min=raw_min, raw_max=raw_max, labels=labels, distinct=distinct)


def kde_bandwidth(labels: np.ndarray) -> float:
    """Rule-of-thumb bandwidth (4 sigma_hat^5 / (3N))^(1/5).

    sigma_hat is the sample standard deviation with the N-1 divisor.
    """
    y = np.asarray(labels, dtype=np.float64)
    n = y.size
    if n < 2:
        raise ValueError(f"need at least 2 labels, got {n}")
    if np.all(y == y[0]):
        raise ValueError("all labels identical: zero sample standard deviation")
    sigma_hat = float(np.std(y, ddof=1))
    return (4.0 * sigma_hat**5 / (3.0 * n)) ** 0.2


def vicinity_params(distinct: np.ndarray, m_kappa: int) -> tuple[float, float, float | None]:
    """Return (kappa_base, kappa, nu) from sorted distinct labels.

    kappa_base is the maximum consecutive gap; kappa = m_kappa * kappa_base;
    nu = 1/kappa^2, or None when kappa == 0.
    """
    d = np.asarray(distinct, dtype=np.float64)
    if d.size < 2:
        raise ValueError(f"need at least 2 distinct labels, got {d.size}")
    if m_kappa < 0:
        raise ValueError(f"m_kappa must be >= 0, got {m_kappa}")
    kappa_base = float(np.max(np.diff(d)))
    kappa = m_kappa * kappa_base
    if kappa > 0 and kappa * kappa == 0.0:
        raise ValueError(f"kappa={kappa} too small: kappa^2 underflows")
    nu = 1.0 / (kappa * kappa) if kappa > 0 else None
    return kappa_base, kappa, nu


def build_labelspace(raw_labels: np.ndarray, m_kappa: int) -> LabelSpace:
    """Normalize labels and fill in all vicinity parameters."""
    base = normalize_labels(raw_labels)
    sigma_delta = kde_bandwidth(base.labels)
    kappa_base, kappa, nu = vicinity_params(base.distinct, m_kappa)
    return LabelSpace(
        raw_min=base.raw_min,
        raw_max=base.raw_max,
        labels=base.labels,
        distinct=base.distinct,
        sigma_delta=sigma_delta,
        kappa_base=kappa_base,
        m_kappa=m_kappa,
        kappa=kappa,
        nu=nu,
    )


def hard_weight(y_target, y_i, kappa):
    """Indicator of |y_target - y_i| <= kappa. Broadcasts over arrays."""
    return np.where(np.abs(np.asarray(y_target) - np.asarray(y_i)) <= kappa, 1.0, 0.0)


def soft_weight(y_target, y_i, nu):
    """exp(-nu (y_target - y_i)^2), in (0, 1]. Broadcasts over arrays."""
    if nu is None or nu <= 0:
        raise ValueError(f"nu must be positive, got {nu}")
    d = np.asarray(y_target, dtype=np.float64) - np.asarray(y_i, dtype=np.float64)
    return np.exp(-nu * d * d)
