"""Conditional x0-predicting U-Net.

Reduced-scale encoder/decoder with skip connections, a sinusoidal time
embedding, and a fully-connected label block consuming the 128-d short
label embedding. The final projection is zero-initialized so an
untrained net predicts the zero image.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .diffmath import PredictionType
from .embednet import SHORT_DIM
from .errors import MissingArtifactError


def sinusoidal_embedding(t: torch.Tensor, dim: int,
                         dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Standard transformer-style position features for integer steps."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype)
                      / max(half - 1, 1))
    args = t.to(dtype)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(8, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.emb_proj(torch.nn.functional.silu(emb))[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class UNet(nn.Module):
    def __init__(self, image_shape: tuple[int, int, int], base_channels: int = 64,
                 channel_mults: tuple[int, ...] = (1, 2, 4), num_res_blocks: int = 2,
                 label_embed_dim: int = SHORT_DIM):
        super().__init__()
        c, w, h = image_shape
        factor = 2 ** (len(channel_mults) - 1)
        if w % factor or h % factor:
            raise ValueError(
                f"image sides {(w, h)} must be divisible by {factor} "
                f"for {len(channel_mults)} resolution levels")
        self.image_shape = tuple(image_shape)
        self.base_channels = base_channels
        self.channel_mults = tuple(channel_mults)
        self.num_res_blocks = num_res_blocks
        self.label_embed_dim = label_embed_dim
        self.time_embed_dim = base_channels * 4
        emb = self.time_embed_dim
        self._zero_skips = False  # test hook: feed zeros through skip paths

        self.time_mlp = nn.Sequential(
            nn.Linear(base_channels, emb), nn.SiLU(), nn.Linear(emb, emb))
        # Fully-connected label block: linear layers with 1-d batch
        # normalization and rectified-linear activations.
        self.label_mlp = nn.Sequential(
            nn.Linear(label_embed_dim, emb), nn.BatchNorm1d(emb), nn.ReLU(),
            nn.Linear(emb, emb), nn.BatchNorm1d(emb), nn.ReLU())

        self.stem = nn.Conv2d(c, base_channels, 3, padding=1)
        chans = [base_channels]
        ch = base_channels
        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for level, mult in enumerate(channel_mults):
            out_ch = base_channels * mult
            blocks = nn.ModuleList()
            for _ in range(num_res_blocks):
                blocks.append(ResBlock(ch, out_ch, emb))
                ch = out_ch
                chans.append(ch)
            self.down_blocks.append(blocks)
            if level < len(channel_mults) - 1:
                self.downsamples.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                chans.append(ch)

        self.mid1 = ResBlock(ch, ch, emb)
        self.mid2 = ResBlock(ch, ch, emb)

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for level, mult in reversed(list(enumerate(channel_mults))):
            out_ch = base_channels * mult
            blocks = nn.ModuleList()
            for _ in range(num_res_blocks + 1):
                blocks.append(ResBlock(ch + chans.pop(), out_ch, emb))
                ch = out_ch
            self.up_blocks.append(blocks)
            if level > 0:
                self.upsamples.append(
                    nn.Conv2d(ch, ch, 3, padding=1))

        self.out_norm = nn.GroupNorm(8, ch)
        self.out_conv = nn.Conv2d(ch, c, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor, h_short: torch.Tensor
                ) -> torch.Tensor:
        emb = self.time_mlp(
            sinusoidal_embedding(t, self.base_channels, dtype=self.stem.weight.dtype))
        emb = emb + self.label_mlp(h_short)
        h = self.stem(x)
        skips = [h]
        for level, blocks in enumerate(self.down_blocks):
            for block in blocks:
                h = block(h, emb)
                skips.append(h)
            if level < len(self.down_blocks) - 1:
                h = self.downsamples[level](h)
                skips.append(h)
        h = self.mid2(self.mid1(h, emb), emb)
        for level, blocks in enumerate(self.up_blocks):
            for block in blocks:
                skip = skips.pop()
                if self._zero_skips:
                    skip = torch.zeros_like(skip)
                h = block(torch.cat([h, skip], dim=1), emb)
            if level < len(self.up_blocks) - 1:
                h = torch.nn.functional.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsamples[level](h)
        return self.out_conv(torch.nn.functional.silu(self.out_norm(h)))


@dataclass
class DenoiserFn:
    """Trainable conditional predictor plus its typed contract."""

    net: UNet
    pred_type: PredictionType
    image_shape: tuple[int, int, int]
    T: int
    label_embed_dim: int = SHORT_DIM
    trained_p_drop: float | None = None
    meta_extra: dict = field(default_factory=dict)

    @property
    def time_embed_dim(self) -> int:
        return self.net.time_embed_dim

    def parameters(self):
        return self.net.parameters()


def build_unet(image_shape: tuple[int, int, int], base_channels: int = 64,
               channel_mults: tuple[int, ...] = (1, 2, 4),
               pred_type: PredictionType = PredictionType.X0,
               num_res_blocks: int = 2, T: int = 1000) -> DenoiserFn:
    net = UNet(image_shape, base_channels=base_channels,
               channel_mults=tuple(channel_mults), num_res_blocks=num_res_blocks)
    net.eval()  # callers opt in to train mode; fresh nets serve inference
    return DenoiserFn(net=net, pred_type=PredictionType(pred_type),
                      image_shape=tuple(image_shape), T=T)


def predict(f: DenoiserFn, xt: torch.Tensor, t, h_short: torch.Tensor) -> torch.Tensor:
    """Run the denoiser; output lives in f.pred_type space.

    xt: (B, C, W, H). t: scalar or (B,) integer steps in 1..T.
    h_short: (128,) broadcast over the batch, or (B, 128) per row.
    """
    if tuple(xt.shape[1:]) != f.image_shape:
        raise ValueError(f"input shape {tuple(xt.shape[1:])} vs model {f.image_shape}")
    b = xt.shape[0]
    t_arr = torch.as_tensor(np.broadcast_to(np.asarray(t, dtype=np.int64), (b,)).copy())
    if torch.any(t_arr < 1) or torch.any(t_arr > f.T):
        raise ValueError(f"t out of range 1..{f.T}")
    if h_short.ndim == 1:
        h_short = h_short.expand(b, -1)
    return f.net(xt, t_arr, h_short)


def save_denoiser(f: DenoiserFn, path: str | Path, schedule_meta: dict,
                  labelspace_meta: dict, null_short: torch.Tensor | None = None,
                  extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "pred_type": f.pred_type.value,
        "image_shape": list(f.image_shape),
        "base_channels": f.net.base_channels,
        "channel_mults": list(f.net.channel_mults),
        "num_res_blocks": f.net.num_res_blocks,
        "label_embed_dim": f.label_embed_dim,
        "T": f.T,
        "trained_p_drop": f.trained_p_drop,
        "schedule": schedule_meta,
        "labelspace": labelspace_meta,
    }
    if extra:
        meta.update(extra)
    blob = {"state_dict": f.net.state_dict(), "meta": meta}
    if null_short is not None:
        blob["null_short"] = null_short.detach()
    torch.save(blob, path)
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=str)


def load_denoiser(path: str | Path) -> tuple[DenoiserFn, dict, torch.Tensor | None]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"no denoiser checkpoint at {path}")
    blob = torch.load(path, weights_only=True)
    meta = blob["meta"]
    net = UNet(tuple(meta["image_shape"]), base_channels=meta["base_channels"],
               channel_mults=tuple(meta["channel_mults"]),
               num_res_blocks=meta["num_res_blocks"])
    net.load_state_dict(blob["state_dict"])
    net.eval()
    f = DenoiserFn(net=net, pred_type=PredictionType(meta["pred_type"]),
                   image_shape=tuple(meta["image_shape"]), T=meta["T"],
                   label_embed_dim=meta["label_embed_dim"],
                   trained_p_drop=meta["trained_p_drop"], meta_extra=meta)
    return f, meta, blob.get("null_short")
