"""Conditional generation: CFG-guided DDIM down a reduced timestep
subsequence, seeded from N(0, H_y), plus the stochastic ancestral variant.

Every (label, image) slot draws from its own counter-based stream keyed by
the label's bit pattern, so any subset of a request reproduces in
isolation and permuting the target list permutes outputs correspondingly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import Dataset, save_dataset
from .denoiser import DenoiserFn, predict
from .diffmath import (
    PredictionType,
    cfg_combine,
    convert_prediction,
    ddim_step,
    ddim_subsequence,
)
from .embednet import EmbeddingNets
from .errors import ConfigError
from .labelspace import LabelSpace
from .rng import stream
from .schedule import NoiseSchedule, coefficients_at


class SamplerKind(str, enum.Enum):
    DDIM = "ddim"
    DDPM = "ddpm"


@dataclass
class SampleRequest:
    y_targets: np.ndarray
    n_per_label: int = 1
    T_prime: int = 50
    gamma: float = 1.5  # recommended range [1.5, 2]
    seed: int = 0
    sampler: SamplerKind = SamplerKind.DDIM

    def __post_init__(self):
        self.y_targets = np.asarray(self.y_targets, dtype=np.float64)
        self.sampler = SamplerKind(self.sampler)
        if self.y_targets.size == 0:
            raise ConfigError("no target labels")
        if np.any((self.y_targets < 0) | (self.y_targets > 1)):
            raise ConfigError("target labels must lie in [0, 1]")
        if self.n_per_label < 1:
            raise ConfigError(f"n_per_label must be positive, got {self.n_per_label}")
        if self.T_prime < 1:
            raise ConfigError(f"T_prime must be >= 1, got {self.T_prime}")
        if not math.isfinite(self.gamma):
            raise ConfigError(f"gamma must be finite, got {self.gamma}")


def _label_key(y: float) -> int:
    """Stable stream key: the bit pattern of the float64 label."""
    return int(np.float64(y).view(np.uint64))


def initial_noise(H_diag: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw from N(0, diag(H)): sqrt(H) * standard normal."""
    return np.sqrt(H_diag) * rng.standard_normal(H_diag.shape)


def ddpm_segment(s: NoiseSchedule, t: int, t_prev: int) -> tuple[float, float, float]:
    """Ancestral-step coefficients for the (possibly multi-step) segment
    t -> t_prev: returns (c_xt, c_x0, sigma^2) with
    x^{t_prev} ~ N(c_xt x^t + c_x0 x0, sigma^2 H).

    On the dense chain (t_prev = t-1) this reproduces the exact one-step
    posterior, variance included; the final segment into 0 is noiseless.
    """
    if not 0 <= t_prev < t:
        raise ValueError(f"need 0 <= t_prev < t, got {t_prev}, {t}")
    abar_t = s.alpha_bar(t)
    abar_prev = s.alpha_bar(t_prev)
    alpha_seg = s.alpha(t) if t_prev == t - 1 else abar_t / abar_prev
    c_xt = math.sqrt(alpha_seg) * (1.0 - abar_prev) / (1.0 - abar_t)
    c_x0 = math.sqrt(abar_prev) * (1.0 - alpha_seg) / (1.0 - abar_t)
    sigma2 = (1.0 - alpha_seg) * (1.0 - abar_prev) / (1.0 - abar_t)
    return c_xt, c_x0, sigma2


def _check_guidance(f: DenoiserFn, gamma: float) -> None:
    if gamma != 1.0 and f.trained_p_drop == 0.0:
        raise ConfigError(
            f"gamma={gamma} needs an unconditional pathway, but the model was "
            "trained with p_drop=0; retrain with p_drop > 0 or sample at gamma=1")


def sample(f: DenoiserFn, nets: EmbeddingNets, schedule: NoiseSchedule,
           req: SampleRequest) -> np.ndarray:
    """Generate n_per_label images per target; (L*n, C, W, H) in [-1, 1].

    Output ordering is label-major: block i holds req.y_targets[i]'s images.
    """
    if req.T_prime > schedule.T:
        raise ConfigError(f"T_prime={req.T_prime} exceeds T={schedule.T}")
    _check_guidance(f, req.gamma)
    ancestral = req.sampler is SamplerKind.DDPM
    ts = ddim_subsequence(schedule.T, req.T_prime)
    transitions = list(zip(ts, ts[1:] + [0]))
    f.net.eval()
    shape = f.image_shape
    n = req.n_per_label
    out = np.empty((req.y_targets.size * n, *shape), dtype=np.float32)
    with torch.no_grad():
        h_null = nets.null_short.detach()
        for li, y in enumerate(req.y_targets):
            emb = nets.embed(float(y))
            H = emb.H_diag.numpy().astype(np.float64)
            gens = [stream(req.seed, _label_key(y), ii) for ii in range(n)]
            x = torch.tensor(
                np.stack([initial_noise(H, g) for g in gens]), dtype=torch.float32)
            H_t = emb.H_diag[None].to(torch.float32)
            for t_cur, t_next in transitions:
                pred_c = predict(f, x, t_cur, emb.h_short)
                x0_tilde = convert_prediction(pred_c, x, t_cur, f.pred_type,
                                              PredictionType.X0, schedule)
                if req.gamma != 1.0:
                    pred_n = predict(f, x, t_cur, h_null)
                    x0_null = convert_prediction(pred_n, x, t_cur, f.pred_type,
                                                 PredictionType.X0, schedule)
                    x0_tilde = cfg_combine(x0_tilde, x0_null, req.gamma)
                if ancestral:
                    c_xt, c_x0, sigma2 = ddpm_segment(schedule, t_cur, t_next)
                    x = c_xt * x + c_x0 * x0_tilde
                    if sigma2 > 0.0:
                        noise = np.stack(
                            [g.standard_normal(shape) for g in gens])
                        x = x + math.sqrt(sigma2) * torch.sqrt(H_t) * torch.tensor(
                            noise, dtype=torch.float32)
                else:
                    x = ddim_step(x, x0_tilde, t_cur, t_next, schedule)
            out[li * n:(li + 1) * n] = torch.clamp(x, -1.0, 1.0).numpy()
    return out


def sample_ddpm(f: DenoiserFn, nets: EmbeddingNets, schedule: NoiseSchedule,
                req: SampleRequest) -> np.ndarray:
    """Ancestral sampling regardless of req.sampler."""
    forced = SampleRequest(y_targets=req.y_targets, n_per_label=req.n_per_label,
                           T_prime=req.T_prime, gamma=req.gamma, seed=req.seed,
                           sampler=SamplerKind.DDPM)
    return sample(f, nets, schedule, forced)


def save_images(images: np.ndarray, assigned_norm: np.ndarray,
                labelspace: LabelSpace, outdir: str | Path,
                provenance: dict | None = None) -> Path:
    """Persist generated images with their assigned labels in raw units.

    The manifest matches the training-dataset layout, so evaluation reads
    real and generated directories identically.
    """
    raw = labelspace.denormalize(np.asarray(assigned_norm, dtype=np.float64))
    ds = Dataset(images=np.asarray(images, dtype=np.float32), raw_labels=raw,
                 class_tags=None, provenance=provenance or {})
    return save_dataset(ds, outdir)


def assigned_labels(req: SampleRequest) -> np.ndarray:
    """Per-image normalized conditioning labels, in output order."""
    return np.repeat(req.y_targets, req.n_per_label)
