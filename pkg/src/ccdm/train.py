"""Vicinal training: batch assembly with condition drop, the hard vicinal
image denoising loss, and the optimizer loop.

The double sum over (target, image) pairs is realized stochastically:
draw a label, perturb it by delta ~ N(0, sigma_delta^2), pick one image
whose label falls within kappa of the target, weight by the vicinal
kernel, and average. Rows drop their condition to the null token with
probability p_drop so the same model serves classifier-free guidance.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .denoiser import DenoiserFn, predict, save_denoiser
from .diffmath import PredictionType, convert_prediction, forward_sample
from .embednet import EmbeddingNets
from .errors import ConfigError, NumericalFault
from .labelspace import LabelSpace, hard_weight, soft_weight
from .rng import stream
from .schedule import NoiseSchedule


class VicinityMode(str, enum.Enum):
    HARD = "hard"
    SOFT = "soft"
    NONE = "none"


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 64
    p_drop: float = 0.1
    vicinity_mode: VicinityMode = VicinityMode.HARD
    pred_type: PredictionType = PredictionType.X0
    lr: float = 1e-4
    seed: int = 0
    retry_limit: int = 10
    checkpoint_every: int | None = None

    def __post_init__(self):
        self.vicinity_mode = VicinityMode(self.vicinity_mode)
        self.pred_type = PredictionType(self.pred_type)
        if self.steps < 0:
            raise ConfigError(f"steps must be nonnegative, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ConfigError(f"p_drop must lie in [0, 1], got {self.p_drop}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.retry_limit < 1:
            raise ConfigError(f"retry_limit must be >= 1, got {self.retry_limit}")


@dataclass
class VicinalBatch:
    images: torch.Tensor          # (m, C, W, H) selected x0 rows
    image_labels: np.ndarray      # (m,) labels of the selected images
    target_labels: np.ndarray     # (m,) conditioning labels y+delta (clamped)
    null_mask: np.ndarray         # (m,) True where the condition was dropped
    weights: torch.Tensor         # (m,) vicinal weights (1 on null rows)
    timesteps: np.ndarray         # (m,) uniform draws from 1..T
    h_short: torch.Tensor         # (m, 128) short embeddings (live null rows)
    H_diags: torch.Tensor         # (m, C, W, H), all-ones on null rows
    delta_raw: np.ndarray         # (m,) unclamped final delta draws
    fallback_count: int = 0

    def __len__(self) -> int:
        return len(self.timesteps)

    @property
    def drop_fraction(self) -> float:
        return float(self.null_mask.mean())


def _validate_mode(cfg: TrainConfig, labelspace: LabelSpace) -> None:
    if cfg.vicinity_mode is VicinityMode.SOFT and labelspace.nu is None:
        raise ConfigError(
            "soft vicinity needs kappa > 0 (nu undefined at kappa=0); "
            "raise m_kappa or switch vicinity_mode to hard/none")


def assemble_batch(images: np.ndarray, labels: np.ndarray, labelspace: LabelSpace,
                   nets: EmbeddingNets, cfg: TrainConfig, T: int,
                   rng: np.random.Generator) -> VicinalBatch:
    """Draw one vicinal minibatch (targets, matched images, weights)."""
    if len(images) == 0:
        raise ValueError("empty dataset")
    _validate_mode(cfg, labelspace)
    m = cfg.batch_size
    distinct = labelspace.distinct
    hard_mode = cfg.vicinity_mode is VicinityMode.HARD
    none_mode = cfg.vicinity_mode is VicinityMode.NONE

    sel_idx = np.empty(m, dtype=np.int64)
    targets = np.empty(m, dtype=np.float64)
    deltas = np.empty(m, dtype=np.float64)
    fallbacks = 0
    base = distinct[rng.integers(0, distinct.size, size=m)]
    for i in range(m):
        chosen = -1
        for _attempt in range(cfg.retry_limit):
            delta = rng.normal(0.0, labelspace.sigma_delta)
            target = float(np.clip(base[i] + delta, 0.0, 1.0))
            if none_mode:
                qualifying = np.arange(len(labels))
            else:
                qualifying = np.flatnonzero(np.abs(labels - target) <= labelspace.kappa)
            if qualifying.size:
                chosen = int(qualifying[rng.integers(0, qualifying.size)])
                break
        if chosen < 0:
            # no image within kappa after retry_limit resamples: borrow the
            # nearest-label image and count the miss
            chosen = int(np.argmin(np.abs(labels - target)))
            fallbacks += 1
        sel_idx[i] = chosen
        targets[i] = target
        deltas[i] = delta

    null_mask = rng.random(m) < cfg.p_drop
    image_labels = labels[sel_idx]
    if none_mode:
        weights = np.ones(m)
    elif hard_mode:
        weights = hard_weight(image_labels, targets, labelspace.kappa)
        weights[weights == 0.0] = 1.0  # only fallback rows can miss the window
    else:
        weights = soft_weight(image_labels, targets, labelspace.nu)
    weights = np.where(null_mask, 1.0, weights)

    h_short, H_diag = nets.embed_batch(targets, null_mask)
    return VicinalBatch(
        images=torch.tensor(np.asarray(images[sel_idx]), dtype=torch.float32),
        image_labels=image_labels,
        target_labels=targets,
        null_mask=null_mask,
        weights=torch.tensor(weights, dtype=torch.float32),
        timesteps=rng.integers(1, T + 1, size=m),
        h_short=h_short,
        H_diags=H_diag,
        delta_raw=deltas,
        fallback_count=fallbacks,
    )


def hvidl_loss(f: DenoiserFn, batch: VicinalBatch, schedule: NoiseSchedule,
               rng: np.random.Generator) -> torch.Tensor:
    """Weighted Mahalanobis x0 loss, averaged over the batch.

    The prediction is converted into x0 space first, so eps- and
    v-parameterized models pick up the implied signal-to-noise weighting
    of their parameterization.
    """
    x0 = batch.images
    m = len(batch)
    eps_std = torch.tensor(
        rng.standard_normal((m, *f.image_shape)), dtype=torch.float32)
    xt = forward_sample(x0, batch.timesteps, batch.H_diags, eps_std, schedule)
    pred = predict(f, xt, batch.timesteps, batch.h_short)
    x0_hat = convert_prediction(pred, xt, batch.timesteps,
                                f.pred_type, PredictionType.X0, schedule)
    maha = ((x0_hat - x0) ** 2 / batch.H_diags).flatten(1).sum(dim=1)
    row_losses = batch.weights * maha
    bad = ~torch.isfinite(row_losses.detach())
    if bad.any():
        row = int(bad.nonzero()[0, 0])
        raise NumericalFault(
            f"non-finite loss at row {row} "
            f"(t={batch.timesteps[row]}, target={batch.target_labels[row]:.6f})")
    return row_losses.mean()


@dataclass
class TraceRecord:
    step: int
    loss: float
    drop_fraction: float
    fallback_count: int

    def as_json(self) -> str:
        return json.dumps({"step": self.step, "loss": self.loss,
                           "drop_fraction": self.drop_fraction,
                           "fallback_count": self.fallback_count})


def train_loop(f: DenoiserFn, images: np.ndarray, labels: np.ndarray,
               labelspace: LabelSpace, nets: EmbeddingNets, schedule: NoiseSchedule,
               cfg: TrainConfig, out_dir: str | Path | None = None,
               trace_path: str | Path | None = None) -> tuple[DenoiserFn, list[TraceRecord]]:
    """Run cfg.steps optimizer updates of the vicinal loss.

    The batch-assembly and noise RNGs are split so results are stable
    for a fixed seed however the two roles interleave. The null-token
    embedding trains jointly with the denoiser; the frozen label
    encoders do not.
    """
    _validate_mode(cfg, labelspace)
    trace: list[TraceRecord] = []
    if cfg.steps == 0:
        if trace_path is not None:
            Path(trace_path).write_text("")
        return f, trace
    rng_batch = stream(cfg.seed, 2, 0)
    rng_noise = stream(cfg.seed, 2, 1)
    opt = torch.optim.Adam([*f.net.parameters(), nets.null_short], lr=cfg.lr)
    f.net.train()
    trace_fh = open(trace_path, "w") if trace_path is not None else None
    try:
        for step in range(1, cfg.steps + 1):
            for attempt in range(2):
                batch = assemble_batch(images, labels, labelspace, nets, cfg,
                                       schedule.T, rng_batch)
                try:
                    loss = hvidl_loss(f, batch, schedule, rng_noise)
                    break
                except NumericalFault:
                    if attempt == 1:
                        raise
            opt.zero_grad()
            loss.backward()
            opt.step()
            rec = TraceRecord(step=step, loss=float(loss.detach()),
                              drop_fraction=batch.drop_fraction,
                              fallback_count=batch.fallback_count)
            trace.append(rec)
            if trace_fh is not None:
                trace_fh.write(rec.as_json() + "\n")
            if (out_dir is not None and cfg.checkpoint_every
                    and step % cfg.checkpoint_every == 0 and step < cfg.steps):
                f.trained_p_drop = cfg.p_drop
                save_denoiser(f, Path(out_dir) / f"ckpt_{step:07d}.pt",
                              schedule.meta(), labelspace.meta(),
                              null_short=nets.null_short)
    finally:
        if trace_fh is not None:
            trace_fh.close()
    f.net.eval()
    f.trained_p_drop = cfg.p_drop
    if out_dir is not None:
        save_denoiser(f, Path(out_dir) / "model.pt", schedule.meta(),
                      labelspace.meta(), null_short=nets.null_short)
    return f, trace
