"""Label encoders: the short embedding h_y^s fed to the denoiser and the
long embedding h_y^l that defines the diagonal covariance H_y = exp(-h_y^l).

Both follow the same scheme: an auxiliary image-to-label regressor is
trained first and split into a feature extractor T1 and a prediction head
T2; a 5-layer MLP T3 (the label encoder) is then trained, with T1 and T2
frozen, to place labels into T1's feature space so that T2 recovers them:

    min_T3  (1/N) sum_i E_zeta [ (T2(T3(y_i + zeta)) - (y_i + zeta))^2 ],
    zeta ~ N(0, 0.04).

The covariance path uses a feature layer as long as the flattened image;
the short path uses a 128-d feature layer. The null condition has a
dedicated learned 128-d vector (zero-initialized) and identity covariance.

Sinusoidal and Gaussian-Fourier encoders exist as ablation substitutes
for the short path; the trained CNN pairing is the default.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import MissingArtifactError

SHORT_DIM = 128
CLAMP_B = 20.0
ZETA_STD = 0.2  # variance 0.04

META_FILE = "embeddings.json"


@dataclass
class ConditionEmbedding:
    """Embeddings for one condition value; H_diag is image-shaped."""

    h_short: torch.Tensor
    h_long: torch.Tensor
    H_diag: torch.Tensor


class AuxRegressor(nn.Module):
    """Small conv regressor split as T2(T1(x)); T1 exposes feature_dim."""

    def __init__(self, image_shape: tuple[int, int, int], feature_dim: int):
        super().__init__()
        c, w, h = image_shape
        if w % 8 or h % 8:
            raise ValueError(f"image sides must be divisible by 8, got {image_shape}")
        self.image_shape = tuple(image_shape)
        self.feature_dim = feature_dim
        self.t1 = nn.Sequential(
            nn.Conv2d(c, 16, 3, stride=2, padding=1),
            nn.GroupNorm(8, 16),
            nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.GroupNorm(8, 32),
            nn.ReLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.GroupNorm(8, 64),
            nn.ReLU(),
            nn.Flatten(),
            nn.Linear(64 * (w // 8) * (h // 8), feature_dim),
            nn.ReLU(),
        )
        self.t2 = nn.Sequential(
            nn.Linear(feature_dim, 128),
            nn.ReLU(),
            nn.Linear(128, 1),
        )
        # Labels are normalized; starting the head at their midpoint helps
        # the short memorization budget (10 epochs).
        nn.init.constant_(self.t2[-1].bias, 0.5)

    def forward_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.t1(x)

    def predict_from_features(self, h: torch.Tensor) -> torch.Tensor:
        return self.t2(h).squeeze(-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.predict_from_features(self.forward_features(x))

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        """Inference-time prediction, clamped into the normalized range."""
        return torch.clamp(self(x), 0.0, 1.0)

    def is_frozen(self) -> bool:
        return all(not p.requires_grad for p in self.parameters())


class LabelMLP(nn.Module):
    """5-layer perceptron mapping a scalar label to an out_dim vector.

    Four hidden linear layers, each followed by group normalization
    (8 groups) and a rectified-linear activation, then a linear output.
    """

    def __init__(self, out_dim: int, hidden: tuple[int, ...] = (64, 128, 256, 512)):
        super().__init__()
        if len(hidden) != 4:
            raise ValueError("expected exactly 4 hidden widths")
        layers: list[nn.Module] = []
        prev = 1
        for width in hidden:
            layers += [nn.Linear(prev, width), nn.GroupNorm(8, width), nn.ReLU()]
            prev = width
        layers.append(nn.Linear(prev, out_dim))
        self.net = nn.Sequential(*layers)
        self.out_dim = out_dim

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        if y.ndim == 1:
            y = y[:, None]
        return self.net(y)


class SinusoidalLabelEncoder(nn.Module):
    """Fixed sin/cos feature map for a scalar label (ablation substitute)."""

    def __init__(self, out_dim: int = SHORT_DIM, scale: float = 1000.0):
        super().__init__()
        if out_dim % 2:
            raise ValueError("out_dim must be even")
        self.out_dim = out_dim
        half = out_dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half) / max(half - 1, 1))
        self.register_buffer("freqs", freqs * scale)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        if y.ndim == 1:
            y = y[:, None]
        arg = y * self.freqs[None, :]
        return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)


class FourierLabelEncoder(nn.Module):
    """Random Fourier features of a scalar label (ablation substitute)."""

    def __init__(self, out_dim: int = SHORT_DIM, scale: float = 16.0, seed: int = 0):
        super().__init__()
        if out_dim % 2:
            raise ValueError("out_dim must be even")
        self.out_dim = out_dim
        gen = torch.Generator().manual_seed(seed)
        self.register_buffer(
            "freqs", torch.randn(out_dim // 2, generator=gen) * scale)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        if y.ndim == 1:
            y = y[:, None]
        arg = 2.0 * math.pi * y * self.freqs[None, :]
        return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)


SHORT_ENCODINGS = ("cnn", "sinusoidal", "fourier")


def embedding_objective(t2, t3, y_noisy: torch.Tensor) -> torch.Tensor:
    """Mean of (T2(T3(y)) - y)^2 over the batch of noisy labels."""
    return torch.mean((t2(t3(y_noisy)) - y_noisy) ** 2)


def train_aux_cnn(images: np.ndarray, labels: np.ndarray, epochs: int = 10,
                  feature_dim: int | None = None, batch_size: int = 64,
                  lr: float = 1e-2, seed: int = 0) -> AuxRegressor:
    """Train the auxiliary image-to-label regressor and freeze it.

    labels must already be normalized into [0, 1]. feature_dim defaults
    to the flattened image size C*W*H (the covariance-path layout).
    Plain momentum SGD here: its steps scale with the gradient, so the
    10-epoch budget settles instead of orbiting the optimum.
    """
    if len(images) == 0:
        raise ValueError("empty dataset")
    try:
        images = np.asarray(images, dtype=np.float32)
    except ValueError as exc:
        raise ValueError(f"inconsistent image dimensions: {exc}") from exc
    if images.ndim != 4:
        raise ValueError(f"expected (N, C, W, H) images, got shape {images.shape}")
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images vs {len(labels)} labels")
    labels = np.asarray(labels, dtype=np.float64)
    if labels.min() < 0 or labels.max() > 1:
        raise ValueError("labels must be normalized into [0, 1]")
    shape = tuple(images.shape[1:])
    if feature_dim is None:
        feature_dim = int(np.prod(shape))
    torch.manual_seed(seed)
    net = AuxRegressor(shape, feature_dim)
    opt = torch.optim.SGD(net.parameters(), lr=lr, momentum=0.5)
    x_all = torch.tensor(np.asarray(images), dtype=torch.float32)
    y_all = torch.tensor(labels, dtype=torch.float32)
    order_rng = np.random.default_rng(seed)
    net.train()
    for _ in range(epochs):
        order = order_rng.permutation(len(images))
        for start in range(0, len(images), batch_size):
            idx = order[start:start + batch_size]
            opt.zero_grad()
            loss = torch.mean((net(x_all[idx]) - y_all[idx]) ** 2)
            loss.backward()
            opt.step()
    net.eval()
    net.requires_grad_(False)
    return net


def final_train_loss(net: AuxRegressor, images: np.ndarray, labels: np.ndarray) -> float:
    with torch.no_grad():
        pred = net(torch.tensor(np.asarray(images), dtype=torch.float32))
        return float(torch.mean((pred - torch.tensor(labels, dtype=torch.float32)) ** 2))


def train_label_mlp(aux: AuxRegressor, distinct: np.ndarray, steps: int = 600,
                    batch_size: int = 64, lr: float = 1e-3, seed: int = 0) -> LabelMLP:
    """Train T3 against the frozen regressor (the objective above).

    Shared by the long (covariance) and short paths; out_dim follows the
    regressor's feature layer.
    """
    distinct = np.asarray(distinct, dtype=np.float64)
    if distinct.size == 0:
        raise ValueError("no distinct labels")
    if not aux.is_frozen():
        raise ValueError("auxiliary regressor must be frozen before training T3")
    torch.manual_seed(seed + 1)
    phi = LabelMLP(out_dim=aux.feature_dim)
    opt = torch.optim.Adam(phi.parameters(), lr=lr)
    draw = np.random.default_rng(seed + 1)
    phi.train()
    for _ in range(steps):
        y = distinct[draw.integers(0, distinct.size, size=batch_size)]
        zeta = draw.normal(0.0, ZETA_STD, size=y.shape)
        y_noisy = torch.tensor(y + zeta, dtype=torch.float32)
        opt.zero_grad()
        loss = embedding_objective(aux.predict_from_features, phi, y_noisy)
        loss.backward()
        opt.step()
    phi.eval()
    phi.requires_grad_(False)
    return phi


train_phi_long = train_label_mlp


def train_phi_short(images: np.ndarray, labels: np.ndarray, distinct: np.ndarray,
                    epochs: int = 10, steps: int = 600, seed: int = 0) -> LabelMLP:
    """Short-path encoder: a 128-d feature regressor pairs with its own T3."""
    aux = train_aux_cnn(images, labels, epochs=epochs, feature_dim=SHORT_DIM, seed=seed + 17)
    return train_label_mlp(aux, distinct, steps=steps, seed=seed + 17)


class EmbeddingNets:
    """Trained encoders plus the learned null-condition vector.

    The null vector starts at zero and is the only embedding parameter
    that later training is allowed to touch (it only matters for
    classifier-free guidance).
    """

    def __init__(self, phi_short: nn.Module, phi_long: nn.Module, aux_cnn: AuxRegressor,
                 image_shape: tuple[int, int, int], clamp_B: float = CLAMP_B,
                 short_encoding: str = "cnn", seed: int = 0):
        if short_encoding not in SHORT_ENCODINGS:
            raise ValueError(f"short_encoding must be one of {SHORT_ENCODINGS}")
        self.phi_short = phi_short
        self.phi_long = phi_long
        self.aux_cnn = aux_cnn
        self.image_shape = tuple(image_shape)
        self.clamp_B = clamp_B
        self.short_encoding = short_encoding
        self.seed = seed
        self.null_short = nn.Parameter(torch.zeros(SHORT_DIM))

    def embed(self, y: float | None) -> ConditionEmbedding:
        """Embed one label, or the null condition when y is None."""
        flat = int(np.prod(self.image_shape))
        if y is None:
            return ConditionEmbedding(
                h_short=self.null_short,
                h_long=torch.zeros(flat),
                H_diag=torch.ones(self.image_shape),
            )
        if not 0.0 <= y <= 1.0:
            raise ValueError(f"label {y} outside [0, 1]")
        with torch.no_grad():
            yt = torch.tensor([float(y)], dtype=torch.float32)
            h_short = self.phi_short(yt)[0]
            h_long = torch.clamp(self.phi_long(yt)[0], -self.clamp_B, self.clamp_B)
        return ConditionEmbedding(
            h_short=h_short,
            h_long=h_long,
            H_diag=torch.exp(-h_long).reshape(self.image_shape),
        )

    def embed_batch(self, y: np.ndarray, null_mask: np.ndarray | None = None
                    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Vectorized embedding: (m, 128) h_short and (m, C, W, H) H_diag.

        Null rows carry the live null_short parameter (gradients flow to
        it) and identity covariance. Non-null rows are detached; the phi
        nets stay frozen.
        """
        y = np.asarray(y, dtype=np.float64)
        m = y.shape[0]
        if null_mask is None:
            null_mask = np.zeros(m, dtype=bool)
        real = ~null_mask
        if np.any((y[real] < 0) | (y[real] > 1)):
            raise ValueError("labels outside [0, 1]")
        h_short = self.null_short.expand(m, SHORT_DIM).clone()
        H_diag = torch.ones((m, *self.image_shape))
        if real.any():
            with torch.no_grad():
                yt = torch.tensor(y[real], dtype=torch.float32)
                hs = self.phi_short(yt)
                hl = torch.clamp(self.phi_long(yt), -self.clamp_B, self.clamp_B)
            idx = torch.tensor(np.flatnonzero(real))
            h_short[idx] = hs
            H_diag[idx] = torch.exp(-hl).reshape(-1, *self.image_shape)
        return h_short, H_diag

    def meta(self) -> dict:
        return {
            "input_range": [0.0, 1.0],
            "out_dim": {"short": SHORT_DIM, "long": int(np.prod(self.image_shape))},
            "clamp_B": self.clamp_B,
            "seed": self.seed,
            "image_shape": list(self.image_shape),
            "short_encoding": self.short_encoding,
            "retrained_per_dataset": True,
        }

    def save(self, outdir: str | Path) -> None:
        """Each net gets its own checkpoint file, plus shared metadata."""
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        torch.save(self.phi_short.state_dict(), outdir / "phi_short.pt")
        torch.save(self.phi_long.state_dict(), outdir / "phi_long.pt")
        torch.save(self.aux_cnn.state_dict(), outdir / "aux_cnn.pt")
        torch.save(self.null_short.detach(), outdir / "null_short.pt")
        with open(outdir / META_FILE, "w") as fh:
            json.dump(self.meta(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, outdir: str | Path) -> "EmbeddingNets":
        outdir = Path(outdir)
        meta_path = outdir / META_FILE
        if not meta_path.exists():
            raise MissingArtifactError(f"no embedding checkpoint at {outdir}")
        with open(meta_path) as fh:
            meta = json.load(fh)
        image_shape = tuple(meta["image_shape"])
        aux = AuxRegressor(image_shape, int(np.prod(image_shape)))
        aux.load_state_dict(torch.load(outdir / "aux_cnn.pt", weights_only=True))
        phi_long = LabelMLP(out_dim=int(np.prod(image_shape)))
        phi_long.load_state_dict(torch.load(outdir / "phi_long.pt", weights_only=True))
        encoding = meta.get("short_encoding", "cnn")
        phi_short: nn.Module
        if encoding == "cnn":
            phi_short = LabelMLP(out_dim=SHORT_DIM)
        elif encoding == "sinusoidal":
            phi_short = SinusoidalLabelEncoder()
        else:
            phi_short = FourierLabelEncoder(seed=meta["seed"])
        phi_short.load_state_dict(torch.load(outdir / "phi_short.pt", weights_only=True))
        for net in (aux, phi_long, phi_short):
            net.eval()
            net.requires_grad_(False)
        nets = cls(phi_short, phi_long, aux, image_shape, clamp_B=meta["clamp_B"],
                   short_encoding=encoding, seed=meta["seed"])
        with torch.no_grad():
            nets.null_short.copy_(torch.load(outdir / "null_short.pt", weights_only=True))
        return nets


def train_embedding_nets(images: np.ndarray, labels_norm: np.ndarray,
                         distinct: np.ndarray, image_shape: tuple[int, int, int],
                         aux_epochs: int = 10, mlp_steps: int = 600,
                         short_encoding: str = "cnn", seed: int = 0) -> EmbeddingNets:
    """Train both encoder paths end to end on one dataset."""
    aux = train_aux_cnn(images, labels_norm, epochs=aux_epochs, seed=seed)
    phi_long = train_label_mlp(aux, distinct, steps=mlp_steps, seed=seed)
    if short_encoding == "cnn":
        phi_short: nn.Module = train_phi_short(
            images, labels_norm, distinct, epochs=aux_epochs, steps=mlp_steps, seed=seed)
    elif short_encoding == "sinusoidal":
        phi_short = SinusoidalLabelEncoder()
    elif short_encoding == "fourier":
        phi_short = FourierLabelEncoder(seed=seed)
    else:
        raise ValueError(f"short_encoding must be one of {SHORT_ENCODINGS}")
    return EmbeddingNets(phi_short, phi_long, aux, image_shape,
                         short_encoding=short_encoding, seed=seed)
