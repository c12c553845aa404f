"""One-step distillation of a trained denoiser into a direct generator.

Three nets train against the frozen teacher: a generator G(z, h_y^s), a
trainable copy of the teacher acting as the fake score, and a projection
discriminator with spectral norm that shares no parameters with either.
The generator gradient is the real-vs-fake score discrepancy evaluated at
a noised generator sample (noised with the row's H_y), plus a hinge GAN
term; the discriminator trains on hinge losses with differentiable
augmentation applied identically to paired real and fake rows. Every row
loss carries the batch's vicinal weight.

Adopted defaults where the method leaves them open: timesteps for the
score discrepancy and the fake-score update are uniform on [1, T]; the
discriminator is updated twice per loop step.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn.utils import spectral_norm

from .denoiser import DenoiserFn, predict
from .diffmath import PredictionType, convert_prediction, forward_sample
from .embednet import SHORT_DIM, EmbeddingNets
from .errors import ConfigError, MissingArtifactError, NumericalFault
from .labelspace import LabelSpace
from .rng import stream
from .sampler import _label_key
from .train import TrainConfig, VicinalBatch, VicinityMode, assemble_batch

Z_DIM = 128
AUGMENT_TOKENS = ("color", "translation", "cutout")
GENERATOR_FILE = "generator.pt"


def _check_size(image_shape) -> int:
    c, w, h = image_shape
    if w != h:
        raise ValueError(f"square images only, got {w}x{h}")
    k = w // 4
    if w < 8 or k * 4 != w or k & (k - 1):
        raise ValueError(f"side must be 4 * 2^k with k >= 1, got {w}")
    return int(math.log2(k))


class GenBlock(nn.Module):
    """Residual 2x upsampling block."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(8, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1)

    @staticmethod
    def _up(x: torch.Tensor) -> torch.Tensor:
        return nn.functional.interpolate(x, scale_factor=2, mode="nearest")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self._up(torch.relu(self.norm1(x)))
        h = self.conv2(torch.relu(self.norm2(self.conv1(h))))
        return h + self.skip(self._up(x))


class Generator(nn.Module):
    """(z, h_y^s) -> image in [-1, 1], built from a 4x4 seed grid."""

    def __init__(self, image_shape: tuple[int, int, int], z_dim: int = Z_DIM,
                 h_dim: int = SHORT_DIM, base_channels: int = 32):
        super().__init__()
        if base_channels % 8:
            raise ValueError(f"base_channels must be divisible by 8, got {base_channels}")
        n_up = _check_size(image_shape)
        c, _, _ = image_shape
        self.image_shape = tuple(image_shape)
        self.z_dim = z_dim
        self.h_dim = h_dim
        self.base_channels = base_channels
        chans = [base_channels * 2 ** (n_up - i) for i in range(n_up + 1)]
        self.c0 = chans[0]
        self.fc = nn.Linear(z_dim + h_dim, chans[0] * 16)
        self.blocks = nn.ModuleList(
            GenBlock(chans[i], chans[i + 1]) for i in range(n_up))
        self.out_norm = nn.GroupNorm(8, chans[-1])
        self.out_conv = nn.Conv2d(chans[-1], c, 3, padding=1)

    def forward(self, z: torch.Tensor, h_short: torch.Tensor) -> torch.Tensor:
        x = self.fc(torch.cat([z, h_short], dim=1))
        x = x.reshape(len(z), self.c0, 4, 4)
        for block in self.blocks:
            x = block(x)
        return torch.tanh(self.out_conv(torch.relu(self.out_norm(x))))


class DiscBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, down: bool):
        super().__init__()
        self.down = down
        self.conv1 = spectral_norm(nn.Conv2d(in_ch, out_ch, 3, padding=1))
        self.conv2 = spectral_norm(nn.Conv2d(out_ch, out_ch, 3, padding=1))
        self.skip = spectral_norm(nn.Conv2d(in_ch, out_ch, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv2(torch.relu(self.conv1(torch.relu(x))))
        s = self.skip(x)
        if self.down:
            h = nn.functional.avg_pool2d(h, 2)
            s = nn.functional.avg_pool2d(s, 2)
        return h + s


class ProjectionDiscriminator(nn.Module):
    """Hinge-logit critic conditioned through an inner product with h_y^s.

    Spectral norm on every weight; no parameters shared with any score net.
    """

    def __init__(self, image_shape: tuple[int, int, int],
                 h_dim: int = SHORT_DIM, base_channels: int = 32):
        super().__init__()
        n_down = _check_size(image_shape)
        c, _, _ = image_shape
        self.image_shape = tuple(image_shape)
        self.h_dim = h_dim
        self.base_channels = base_channels
        chans = [c] + [base_channels * 2 ** (i + 1) for i in range(n_down)]
        blocks = [DiscBlock(chans[i], chans[i + 1], down=True)
                  for i in range(n_down)]
        blocks.append(DiscBlock(chans[-1], chans[-1], down=False))
        self.blocks = nn.ModuleList(blocks)
        self.feat_dim = chans[-1]
        self.head = spectral_norm(nn.Linear(self.feat_dim, 1))
        self.proj = spectral_norm(nn.Linear(h_dim, self.feat_dim, bias=False))

    def forward(self, x: torch.Tensor, h_short: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        f = torch.relu(x).sum(dim=(2, 3))
        return (self.head(f) + (self.proj(h_short) * f).sum(dim=1, keepdim=True)).squeeze(1)


# ---------------------------------------------------------------------------
# differentiable augmentation


def sample_augment_params(policy, n: int, image_shape, rng: np.random.Generator) -> dict:
    """Draw one parameter set; applying it to paired real and fake batches
    of size n transforms both identically."""
    for tok in policy:
        if tok not in AUGMENT_TOKENS:
            raise ValueError(f"unknown augmentation token {tok!r}")
    _, w, h = image_shape
    params: dict = {"policy": tuple(policy), "n": n}
    if "color" in policy:
        params["brightness"] = rng.uniform(-0.5, 0.5, size=n)
        params["saturation"] = rng.uniform(0.0, 2.0, size=n)
        params["contrast"] = rng.uniform(0.5, 1.5, size=n)
    if "translation" in policy:
        sx, sy = max(w // 8, 1), max(h // 8, 1)
        params["tx"] = rng.integers(-sx, sx + 1, size=n)
        params["ty"] = rng.integers(-sy, sy + 1, size=n)
    if "cutout" in policy:
        cw, ch = max(w // 2, 1), max(h // 2, 1)
        params["cut_w"], params["cut_h"] = cw, ch
        params["cut_x"] = rng.integers(0, w - cw + 1, size=n)
        params["cut_y"] = rng.integers(0, h - ch + 1, size=n)
    return params


def _col(values, like: torch.Tensor) -> torch.Tensor:
    return torch.tensor(values, dtype=like.dtype)[:, None, None, None]


def apply_augment(images: torch.Tensor, params: dict) -> torch.Tensor:
    policy = params["policy"]
    if not policy:
        return images
    x = images
    if "color" in policy:
        x = x + _col(params["brightness"], x)
        sat_mean = x.mean(dim=1, keepdim=True)
        x = (x - sat_mean) * _col(params["saturation"], x) + sat_mean
        con_mean = x.mean(dim=(1, 2, 3), keepdim=True)
        x = (x - con_mean) * _col(params["contrast"], x) + con_mean
    if "translation" in policy:
        rows = []
        for i in range(len(x)):
            dx, dy = int(params["tx"][i]), int(params["ty"][i])
            # pad both axes by the shift magnitude, then crop back
            padded = nn.functional.pad(x[i], (abs(dy), abs(dy), abs(dx), abs(dx)))
            ox, oy = abs(dx) - dx, abs(dy) - dy
            rows.append(padded[:, ox:ox + x.shape[2], oy:oy + x.shape[3]])
        x = torch.stack(rows)
    if "cutout" in policy:
        mask = torch.ones_like(x)
        for i in range(len(x)):
            cx, cy = int(params["cut_x"][i]), int(params["cut_y"][i])
            mask[i, :, cx:cx + params["cut_w"], cy:cy + params["cut_h"]] = 0.0
        x = x * mask
    return x


def diffaugment(images: torch.Tensor, policy, rng: np.random.Generator) -> torch.Tensor:
    return apply_augment(images, sample_augment_params(
        policy, len(images), images.shape[1:], rng))


# ---------------------------------------------------------------------------
# losses


def hinge_d_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor,
                 weights: torch.Tensor) -> torch.Tensor:
    return (weights * torch.relu(1.0 - real_logits)).mean() \
        + (weights * torch.relu(1.0 + fake_logits)).mean()


def hinge_g_loss(fake_logits: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    return -(weights * fake_logits).mean()


@dataclass
class DistillConfig:
    steps: int
    batch_size: int = 64
    vicinity_mode: VicinityMode = VicinityMode.HARD
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    lr_fake: float = 1e-4
    d_updates: int = 2
    seed: int = 0
    retry_limit: int = 10

    def __post_init__(self) -> None:
        self.vicinity_mode = VicinityMode(self.vicinity_mode)
        if self.steps < 0:
            raise ConfigError(f"steps must be nonnegative, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if min(self.lr_g, self.lr_d, self.lr_fake) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.d_updates < 1:
            raise ConfigError(f"d_updates must be >= 1, got {self.d_updates}")


@dataclass
class DistillState:
    generator: Generator
    fake_score: DenoiserFn
    real_score: DenoiserFn
    disc: ProjectionDiscriminator
    w_D: float = 10.0
    w_G: float = 1.0
    policy: tuple = AUGMENT_TOKENS


def init_distill(real_score: DenoiserFn, seed: int = 0, w_D: float = 10.0,
                 w_G: float = 1.0, policy=AUGMENT_TOKENS,
                 base_channels: int = 32) -> DistillState:
    """Freeze the teacher, clone it as the fake score, build G and D."""
    if w_D <= 0 or w_G <= 0:
        raise ConfigError(f"w_D and w_G must be positive, got {w_D}, {w_G}")
    for tok in policy:
        if tok not in AUGMENT_TOKENS:
            raise ConfigError(f"unknown augmentation token {tok!r}")
    real_score.net.eval()
    real_score.net.requires_grad_(False)
    fake = copy.deepcopy(real_score)
    fake.net.requires_grad_(True)
    torch.manual_seed(seed)
    gen = Generator(real_score.image_shape, h_dim=real_score.label_embed_dim,
                    base_channels=base_channels)
    disc = ProjectionDiscriminator(real_score.image_shape,
                                   h_dim=real_score.label_embed_dim,
                                   base_channels=base_channels)
    return DistillState(generator=gen, fake_score=fake, real_score=real_score,
                        disc=disc, w_D=w_D, w_G=w_G, policy=tuple(policy))


def param_hash(module: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def _x0_pred(f: DenoiserFn, xt: torch.Tensor, t: np.ndarray,
             h_short: torch.Tensor, s) -> torch.Tensor:
    return convert_prediction(predict(f, xt, t, h_short), xt, t,
                              f.pred_type, PredictionType.X0, s)


def dm_grad(state: DistillState, x_g: torch.Tensor, t: np.ndarray,
            h_short: torch.Tensor, H_diag: torch.Tensor,
            eps_std: torch.Tensor, schedule) -> torch.Tensor:
    """Real-vs-fake score discrepancy at a noised generator sample,
    normalized per row by the real branch's absolute residual."""
    with torch.no_grad():
        xt = forward_sample(x_g, t, H_diag, eps_std, schedule)
        pred_real = _x0_pred(state.real_score, xt, t, h_short, schedule)
        pred_fake = _x0_pred(state.fake_score, xt, t, h_short, schedule)
        norm = (x_g - pred_real).abs().mean(dim=(1, 2, 3), keepdim=True)
        return (pred_fake - pred_real) / norm.clamp_min(1e-8)


def _draw_z(rng: np.random.Generator, n: int) -> torch.Tensor:
    return torch.tensor(rng.standard_normal((n, Z_DIM)), dtype=torch.float32)


def _draw_noise(rng: np.random.Generator, n: int, shape) -> torch.Tensor:
    return torch.tensor(rng.standard_normal((n, *shape)), dtype=torch.float32)


def generator_step(state: DistillState, batch: VicinalBatch, schedule,
                   rng: np.random.Generator, z: torch.Tensor | None = None,
                   opt_g: torch.optim.Optimizer | None = None) -> dict:
    """Distribution-matching term plus w_G times the hinge term, rows
    weighted by the batch's vicinal weights. Applies opt_g when given."""
    m = len(batch)
    shape = state.real_score.image_shape
    if z is None:
        z = _draw_z(rng, m)
    x_g = state.generator(z, batch.h_short)
    t = rng.integers(1, schedule.T + 1, size=m)
    eps = _draw_noise(rng, m, shape)
    grad = dm_grad(state, x_g, t, batch.h_short, batch.H_diags, eps, schedule)
    dm_rows = 0.5 * ((x_g - (x_g - grad).detach()) ** 2).flatten(1).mean(1)
    dm_term = (batch.weights * dm_rows).mean()
    params = sample_augment_params(state.policy, m, shape, rng)
    logits = state.disc(apply_augment(x_g, params), batch.h_short)
    hinge_term = hinge_g_loss(logits, batch.weights)
    loss = dm_term + state.w_G * hinge_term
    if not torch.isfinite(loss):
        raise NumericalFault("non-finite generator loss")
    if opt_g is not None:
        opt_g.zero_grad()
        loss.backward()
        opt_g.step()
    return {"loss": float(loss.detach()), "dm": float(dm_term.detach()),
            "hinge": float(hinge_term.detach())}


def critic_step(state: DistillState, batch: VicinalBatch, schedule,
                rng: np.random.Generator,
                opt_fake: torch.optim.Optimizer | None = None,
                opt_d: torch.optim.Optimizer | None = None,
                d_updates: int = 2) -> tuple[float, float]:
    """Fake-score denoising update on generator samples, then the hinge
    discriminator update (run d_updates times when opt_d is given)."""
    m = len(batch)
    shape = state.real_score.image_shape
    with torch.no_grad():
        x_g = state.generator(_draw_z(rng, m), batch.h_short)
    t = rng.integers(1, schedule.T + 1, size=m)
    eps = _draw_noise(rng, m, shape)
    xt = forward_sample(x_g, t, batch.H_diags, eps, schedule)
    pred = _x0_pred(state.fake_score, xt, t, batch.h_short, schedule)
    fs_rows = ((pred - x_g) ** 2 / batch.H_diags).flatten(1).sum(1)
    fs_loss = (batch.weights * fs_rows).mean()
    if not torch.isfinite(fs_loss):
        raise NumericalFault("non-finite fake-score loss")
    if opt_fake is not None:
        opt_fake.zero_grad()
        fs_loss.backward()
        opt_fake.step()

    n_updates = d_updates if opt_d is not None else 1
    d_vals = []
    for _ in range(n_updates):
        with torch.no_grad():
            x_f = state.generator(_draw_z(rng, m), batch.h_short)
        params = sample_augment_params(state.policy, m, shape, rng)
        real_logits = state.disc(apply_augment(batch.images, params), batch.h_short)
        fake_logits = state.disc(apply_augment(x_f, params), batch.h_short)
        d_loss = state.w_D * hinge_d_loss(real_logits, fake_logits, batch.weights)
        if not torch.isfinite(d_loss):
            raise NumericalFault("non-finite discriminator loss")
        if opt_d is not None:
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
        d_vals.append(float(d_loss.detach()))
    return float(fs_loss.detach()), float(np.mean(d_vals))


def distill_loop(state: DistillState, images, labels, labelspace: LabelSpace,
                 nets: EmbeddingNets, schedule, cfg: DistillConfig,
                 out_dir: str | Path | None = None,
                 trace_path: str | Path | None = None) -> tuple[DistillState, list[dict]]:
    """Alternate critic and generator phases for cfg.steps steps."""
    if trace_path is not None:
        trace_path = Path(trace_path)
        trace_path.parent.mkdir(parents=True, exist_ok=True)
        trace_path.write_text("")
    if cfg.steps == 0:
        return state, []
    assemble_cfg = TrainConfig(steps=1, batch_size=cfg.batch_size, p_drop=0.0,
                               vicinity_mode=cfg.vicinity_mode, seed=cfg.seed,
                               retry_limit=cfg.retry_limit)
    rng_batch = stream(cfg.seed, 3, 0)
    rng_noise = stream(cfg.seed, 3, 1)
    opt_g = torch.optim.Adam(state.generator.parameters(), lr=cfg.lr_g,
                             betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(state.disc.parameters(), lr=cfg.lr_d,
                             betas=(0.5, 0.999))
    opt_fake = torch.optim.Adam(state.fake_score.net.parameters(), lr=cfg.lr_fake)
    state.generator.train()
    state.disc.train()
    state.fake_score.net.train()
    trace = []
    for step in range(cfg.steps):
        for attempt in range(2):
            try:
                batch = assemble_batch(images, labels, labelspace, nets,
                                       assemble_cfg, schedule.T, rng_batch)
                # conditioning is frozen here, and one batch feeds several
                # backward passes: cut the embedding graph off
                batch.h_short = batch.h_short.detach()
                batch.H_diags = batch.H_diags.detach()
                fs_loss, d_loss = critic_step(state, batch, schedule, rng_noise,
                                              opt_fake=opt_fake, opt_d=opt_d,
                                              d_updates=cfg.d_updates)
                g_parts = generator_step(state, batch, schedule, rng_noise,
                                         opt_g=opt_g)
                break
            except NumericalFault:
                if attempt == 1:
                    raise NumericalFault(
                        f"sustained non-finite distillation loss at step {step}")
        record = {"step": step, "g_loss": g_parts["loss"], "dm_loss": g_parts["dm"],
                  "d_loss": d_loss, "fake_score_loss": fs_loss}
        trace.append(record)
        if trace_path is not None:
            with open(trace_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
    state.generator.eval()
    state.disc.eval()
    state.fake_score.net.eval()
    if out_dir is not None:
        save_generator(state, Path(out_dir) / GENERATOR_FILE, labelspace)
    return state, trace


def save_generator(state: DistillState, path: str | Path,
                   labelspace: LabelSpace, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    gen = state.generator
    meta = {
        "z_dim": gen.z_dim,
        "w_D": state.w_D,
        "w_G": state.w_G,
        "policy": list(state.policy),
        "m_kappa": labelspace.m_kappa,
        "h_dim": gen.h_dim,
        "base_channels": gen.base_channels,
        "image_shape": list(gen.image_shape),
        "t_distribution": "uniform",
    }
    if extra:
        meta.update(extra)
    torch.save({"state_dict": gen.state_dict(), "meta": meta}, path)
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return path


def load_generator(path: str | Path) -> tuple[Generator, dict]:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"no generator checkpoint at {path}; "
                                   "run distillation first")
    blob = torch.load(path, weights_only=True)
    meta = blob["meta"]
    gen = Generator(tuple(meta["image_shape"]), z_dim=meta["z_dim"],
                    h_dim=meta["h_dim"], base_channels=meta["base_channels"])
    gen.load_state_dict(blob["state_dict"])
    gen.eval()
    return gen, meta


def one_step_sample(generator: Generator, nets: EmbeddingNets, y_targets,
                    n_per_label: int = 1, seed: int = 0) -> np.ndarray:
    """Direct G(z, h_y^s) draws; output is label-major like the iterative
    sampler, with the z stream keyed by the label's bit pattern."""
    y_targets = np.asarray(y_targets, dtype=np.float64)
    outs = []
    with torch.no_grad():
        for y in y_targets:
            emb = nets.embed(float(y))
            gens = [stream(seed, _label_key(float(y)), ii)
                    for ii in range(n_per_label)]
            z = torch.tensor(np.stack([g.standard_normal(Z_DIM) for g in gens]),
                             dtype=torch.float32)
            h = emb.h_short[None].expand(n_per_label, -1)
            outs.append(generator(z, h))
    return torch.cat(outs).numpy()
