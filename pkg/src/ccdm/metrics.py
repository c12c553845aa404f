"""Windowed evaluation for continuous-label generators.

Centers y_e^(1) < ... < y_e^(m_c) partition the label range; SFID computes
a Frechet distance between real and fake feature Gaussians inside each
window |label - c| <= r_sfid and averages. Label Score is the MAE between
oracle-predicted and assigned labels in raw units; Diversity is the
natural-log entropy of argmax oracle classes per center. Oracle networks
are trained on the real data; the feature space for SFID is the oracle
regressor's penultimate layer.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .errors import ConfigError
from .labelspace import LabelSpace

FEATURE_DIM = 32


def _conv_trunk(in_ch: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    ch = in_ch
    for out_ch in (16, 32, 64):
        layers += [
            nn.Conv2d(ch, out_ch, 3, stride=2, padding=1),
            nn.GroupNorm(8, out_ch),
            nn.ReLU(),
        ]
        ch = out_ch
    layers.append(nn.Flatten())
    return nn.Sequential(*layers)


class OracleRegressor(nn.Module):
    """Label predictor whose penultimate activations double as FID features."""

    def __init__(self, image_shape: tuple[int, int, int],
                 feature_dim: int = FEATURE_DIM):
        super().__init__()
        c, w, h = image_shape
        if w % 8 or h % 8:
            raise ValueError(f"image sides must be divisible by 8, got {w}x{h}")
        self.image_shape = tuple(image_shape)
        self.feature_dim = feature_dim
        self.trunk = _conv_trunk(c)
        self.to_features = nn.Sequential(
            nn.Linear(64 * (w // 8) * (h // 8), feature_dim), nn.ReLU())
        self.head = nn.Linear(feature_dim, 1)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.to_features(self.trunk(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x)).squeeze(-1)

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        return self(x).clamp(0.0, 1.0)


class OracleClassifier(nn.Module):
    def __init__(self, image_shape: tuple[int, int, int], n_classes: int):
        super().__init__()
        c, w, h = image_shape
        if w % 8 or h % 8:
            raise ValueError(f"image sides must be divisible by 8, got {w}x{h}")
        if n_classes < 2:
            raise ValueError(f"need at least 2 classes, got {n_classes}")
        self.n_classes = n_classes
        self.trunk = _conv_trunk(c)
        self.head = nn.Sequential(
            nn.Linear(64 * (w // 8) * (h // 8), 64), nn.ReLU(),
            nn.Linear(64, n_classes))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.trunk(x))

    def predict_class(self, x: torch.Tensor) -> torch.Tensor:
        return self(x).argmax(dim=-1)


def _validate_images(images, labels) -> np.ndarray:
    x = np.asarray(images, dtype=np.float32)
    if x.size == 0:
        raise ValueError("empty dataset")
    if x.ndim != 4:
        raise ValueError(f"images must be (N, C, W, H), got {x.shape}")
    if len(x) != len(labels):
        raise ValueError(f"{len(x)} images vs {len(labels)} labels")
    return x


def train_oracle_regressor(images, labels_norm, epochs: int = 10,
                           batch_size: int = 64, lr: float = 1e-2,
                           seed: int = 0) -> OracleRegressor:
    """Fit the label oracle with momentum SGD; returns it frozen."""
    x_np = _validate_images(images, labels_norm)
    y_np = np.asarray(labels_norm, dtype=np.float64)
    if y_np.min() < 0.0 or y_np.max() > 1.0:
        raise ValueError("labels must be normalized to [0, 1]")
    torch.manual_seed(seed)
    net = OracleRegressor(tuple(x_np.shape[1:]))
    opt = torch.optim.SGD(net.parameters(), lr=lr, momentum=0.5)
    x_all = torch.tensor(x_np, dtype=torch.float32)
    y_all = torch.tensor(y_np, dtype=torch.float32)
    rng = np.random.default_rng(seed)
    net.train()
    for _ in range(epochs):
        order = rng.permutation(len(x_all))
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            opt.zero_grad()
            loss = torch.mean((net(x_all[idx]) - y_all[idx]) ** 2)
            loss.backward()
            opt.step()
    net.eval()
    net.requires_grad_(False)
    return net


def train_oracle_classifier(images, class_tags, epochs: int = 10,
                            batch_size: int = 64, lr: float = 1e-2,
                            seed: int = 0) -> OracleClassifier:
    x_np = _validate_images(images, class_tags)
    tags = np.asarray(class_tags, dtype=np.int64)
    if tags.min() < 0:
        raise ValueError("class tags must be nonnegative")
    n_classes = int(tags.max()) + 1
    torch.manual_seed(seed)
    net = OracleClassifier(tuple(x_np.shape[1:]), n_classes)
    opt = torch.optim.SGD(net.parameters(), lr=lr, momentum=0.5)
    x_all = torch.tensor(x_np, dtype=torch.float32)
    y_all = torch.tensor(tags)
    rng = np.random.default_rng(seed)
    net.train()
    for _ in range(epochs):
        order = rng.permutation(len(x_all))
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            opt.zero_grad()
            loss = nn.functional.cross_entropy(net(x_all[idx]), y_all[idx])
            loss.backward()
            opt.step()
    net.eval()
    net.requires_grad_(False)
    return net


def make_feature_extractor(regressor: OracleRegressor,
                           batch_size: int = 256) -> Callable[[np.ndarray], np.ndarray]:
    def extract(images: np.ndarray) -> np.ndarray:
        x = torch.tensor(np.asarray(images), dtype=torch.float32)
        outs = []
        with torch.no_grad():
            for lo in range(0, len(x), batch_size):
                outs.append(regressor.features(x[lo:lo + batch_size]))
        return torch.cat(outs).numpy().astype(np.float64)

    return extract


def _predict_labels(regressor: OracleRegressor, images,
                    batch_size: int = 256) -> np.ndarray:
    x = torch.tensor(np.asarray(images), dtype=torch.float32)
    outs = []
    with torch.no_grad():
        for lo in range(0, len(x), batch_size):
            outs.append(regressor.predict(x[lo:lo + batch_size]))
    return torch.cat(outs).numpy().astype(np.float64)


def _predict_classes(classifier: OracleClassifier, images,
                     batch_size: int = 256) -> np.ndarray:
    x = torch.tensor(np.asarray(images), dtype=torch.float32)
    outs = []
    with torch.no_grad():
        for lo in range(0, len(x), batch_size):
            outs.append(classifier.predict_class(x[lo:lo + batch_size]))
    return torch.cat(outs).numpy()


@dataclass
class EvalProtocol:
    """Evaluation grid: centers, per-center budget, window radius, oracles."""

    centers: np.ndarray
    n_per_center: int
    r_sfid: float
    feature_extractor: Callable[[np.ndarray], np.ndarray]
    oracle_regressor: OracleRegressor
    oracle_classifier: OracleClassifier | None = None

    def __post_init__(self) -> None:
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.centers.size == 0:
            raise ConfigError("no evaluation centers")
        if np.any((self.centers < 0.0) | (self.centers > 1.0)):
            raise ConfigError("centers must lie in [0, 1]")
        if np.any(np.diff(self.centers) <= 0.0):
            raise ConfigError("centers must be strictly increasing")
        if not math.isfinite(self.r_sfid) or self.r_sfid < 0.0:
            raise ConfigError(f"r_sfid must be >= 0, got {self.r_sfid}")
        if self.n_per_center < 1:
            raise ConfigError(f"n_per_center must be positive, got {self.n_per_center}")


def _psd_sqrt_eigvals(sym: np.ndarray) -> np.ndarray:
    # eigh on the symmetrized product; negative eigenvalues are rounding
    # artifacts of a PSD matrix and get floored at 0
    w = np.linalg.eigvalsh((sym + sym.T) / 2.0)
    return np.sqrt(np.maximum(w, 0.0))


def _psd_sqrt(sym: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((sym + sym.T) / 2.0)
    return (v * np.sqrt(np.maximum(w, 0.0))) @ v.T


def fid(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)); the cross term
    is computed through S_a^(1/2) S_b S_a^(1/2), whose spectrum equals
    that of S_a S_b but stays symmetric.
    """
    fa = np.asarray(features_a, dtype=np.float64)
    fb = np.asarray(features_b, dtype=np.float64)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise ValueError(f"feature shapes {fa.shape} vs {fb.shape}")
    if len(fa) < 2 or len(fb) < 2:
        raise ValueError(f"need at least 2 rows per side, got {len(fa)} and {len(fb)}")
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(fa, rowvar=False))
    cov_b = np.atleast_2d(np.cov(fb, rowvar=False))
    root_a = _psd_sqrt(cov_a)
    cross = _psd_sqrt_eigvals(root_a @ cov_b @ root_a).sum()
    val = float(((mu_a - mu_b) ** 2).sum()
                + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross)
    return max(val, 0.0)


def _window(labels: np.ndarray, center: float, r: float) -> np.ndarray:
    return np.flatnonzero(np.abs(np.asarray(labels, dtype=np.float64) - center) <= r)


@dataclass
class SfidResult:
    per_center: np.ndarray          # NaN where the window was skipped
    mean: float
    std: float
    skipped: int
    real_counts: np.ndarray
    fake_counts: np.ndarray


def sfid(protocol: EvalProtocol, real_images, real_labels,
         fake_images, fake_labels) -> SfidResult:
    """Per-center windowed FID. Windows thinner than 2 items on either
    side are skipped and counted; every window empty is a protocol error."""
    real_images = _validate_images(real_images, real_labels)
    fake_images = _validate_images(fake_images, fake_labels)
    m = len(protocol.centers)
    per_center = np.full(m, np.nan)
    real_counts = np.zeros(m, dtype=np.int64)
    fake_counts = np.zeros(m, dtype=np.int64)
    for j, c in enumerate(protocol.centers):
        ri = _window(real_labels, c, protocol.r_sfid)
        fi = _window(fake_labels, c, protocol.r_sfid)
        real_counts[j], fake_counts[j] = len(ri), len(fi)
        if len(ri) < 2 or len(fi) < 2:
            continue
        per_center[j] = fid(protocol.feature_extractor(real_images[ri]),
                            protocol.feature_extractor(fake_images[fi]))
    ok = ~np.isnan(per_center)
    if not ok.any():
        raise ConfigError(
            "every evaluation window was empty; widen r_sfid or move the "
            "centers toward the data's label range")
    return SfidResult(
        per_center=per_center,
        mean=float(per_center[ok].mean()),
        std=float(per_center[ok].std()),
        skipped=int((~ok).sum()),
        real_counts=real_counts,
        fake_counts=fake_counts,
    )


def label_score(oracle_regressor: OracleRegressor, fake_images,
                assigned_norm, labelspace: LabelSpace) -> tuple[float, float]:
    """MAE between predicted and assigned labels, in raw label units.

    The std here is across images; the report-level std is across centers.
    """
    fake_images = _validate_images(fake_images, assigned_norm)
    scale = labelspace.raw_max - labelspace.raw_min
    preds = _predict_labels(oracle_regressor, fake_images)
    errors = np.abs(preds - np.asarray(assigned_norm, dtype=np.float64)) * scale
    return float(errors.mean()), float(errors.std())


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


@dataclass
class DiversityResult:
    per_center: np.ndarray          # NaN where the center had no images
    mean: float
    std: float
    skipped: int


def diversity(protocol: EvalProtocol, fake_images, fake_labels) -> DiversityResult:
    """Natural-log entropy of argmax oracle classes inside each window."""
    if protocol.oracle_classifier is None:
        raise ConfigError("protocol has no oracle classifier; diversity needs "
                          "a dataset with class tags")
    fake_images = _validate_images(fake_images, fake_labels)
    classes = _predict_classes(protocol.oracle_classifier, fake_images)
    k = protocol.oracle_classifier.n_classes
    per_center = np.full(len(protocol.centers), np.nan)
    for j, c in enumerate(protocol.centers):
        fi = _window(fake_labels, c, protocol.r_sfid)
        if len(fi) == 0:
            continue
        per_center[j] = _entropy(np.bincount(classes[fi], minlength=k).astype(np.float64))
    ok = ~np.isnan(per_center)
    if not ok.any():
        raise ConfigError("every diversity window was empty")
    return DiversityResult(
        per_center=per_center,
        mean=float(per_center[ok].mean()),
        std=float(per_center[ok].std()),
        skipped=int((~ok).sum()),
    )


def _optional(x) -> list:
    return [None if not np.isfinite(v) else float(v) for v in x]


@dataclass
class EvalReport:
    """Aggregated evaluation. Means average per-center values; stds are
    population stds across centers. Entropy base is e."""

    centers: list
    per_center_fid: list
    per_center_label_score: list
    per_center_diversity: list | None
    real_counts: list
    fake_counts: list
    sfid_mean: float
    sfid_std: float
    label_score_mean: float
    label_score_std: float
    diversity_mean: float | None
    diversity_std: float | None
    skipped_centers: int
    metadata: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "centers": [float(c) for c in self.centers],
            "per_center_fid": self.per_center_fid,
            "per_center_label_score": self.per_center_label_score,
            "per_center_diversity": self.per_center_diversity,
            "real_counts": [int(n) for n in self.real_counts],
            "fake_counts": [int(n) for n in self.fake_counts],
            "sfid_mean": self.sfid_mean,
            "sfid_std": self.sfid_std,
            "label_score_mean": self.label_score_mean,
            "label_score_std": self.label_score_std,
            "diversity_mean": self.diversity_mean,
            "diversity_std": self.diversity_std,
            "skipped_centers": self.skipped_centers,
            "metadata": self.metadata,
        }

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=2, sort_keys=True)
        return path

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["center", "fid", "label_score", "diversity",
                             "real_count", "fake_count"])
            for j, c in enumerate(self.centers):
                div = (self.per_center_diversity[j]
                       if self.per_center_diversity is not None else "")
                writer.writerow([
                    repr(float(c)),
                    "" if self.per_center_fid[j] is None else repr(self.per_center_fid[j]),
                    "" if self.per_center_label_score[j] is None
                    else repr(self.per_center_label_score[j]),
                    "" if div in (None, "") else repr(div),
                    int(self.real_counts[j]),
                    int(self.fake_counts[j]),
                ])
        return path

    @classmethod
    def from_json(cls, path: str | Path) -> "EvalReport":
        with open(path) as fh:
            d = json.load(fh)
        return cls(**d)


def evaluate(protocol: EvalProtocol, real_images, real_labels,
             fake_images, fake_assigned, labelspace: LabelSpace) -> EvalReport:
    """Full protocol pass: SFID, per-center Label Score, optional Diversity."""
    s = sfid(protocol, real_images, real_labels, fake_images, fake_assigned)

    fake_assigned = np.asarray(fake_assigned, dtype=np.float64)
    scale = labelspace.raw_max - labelspace.raw_min
    preds = _predict_labels(protocol.oracle_regressor, fake_images)
    per_ls = np.full(len(protocol.centers), np.nan)
    for j, c in enumerate(protocol.centers):
        fi = _window(fake_assigned, c, protocol.r_sfid)
        if len(fi) == 0:
            continue
        per_ls[j] = np.abs(preds[fi] - fake_assigned[fi]).mean() * scale
    ls_ok = ~np.isnan(per_ls)
    if not ls_ok.any():
        raise ConfigError("no fake images fell inside any label-score window")

    div = None
    if protocol.oracle_classifier is not None:
        div = diversity(protocol, fake_images, fake_assigned)

    return EvalReport(
        centers=list(protocol.centers),
        per_center_fid=_optional(s.per_center),
        per_center_label_score=_optional(per_ls),
        per_center_diversity=None if div is None else _optional(div.per_center),
        real_counts=list(s.real_counts),
        fake_counts=list(s.fake_counts),
        sfid_mean=s.mean,
        sfid_std=s.std,
        label_score_mean=float(per_ls[ls_ok].mean()),
        label_score_std=float(per_ls[ls_ok].std()),
        diversity_mean=None if div is None else div.mean,
        diversity_std=None if div is None else div.std,
        skipped_centers=s.skipped,
        metadata={"entropy_base": "e", "feature_dim": FEATURE_DIM,
                  "raw_range": [labelspace.raw_min, labelspace.raw_max]},
    )


def plot_report(report: EvalReport, out_path: str | Path) -> Path:
    """Line graphs of the per-center metrics against the centers."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    has_div = report.per_center_diversity is not None
    n_panels = 3 if has_div else 2
    fig, axes = plt.subplots(1, n_panels, figsize=(4.2 * n_panels, 3.4))
    panels = [("FID", report.per_center_fid),
              ("Label Score", report.per_center_label_score)]
    if has_div:
        panels.append(("Diversity", report.per_center_diversity))
    for ax, (name, values) in zip(axes, panels):
        xs = [c for c, v in zip(report.centers, values) if v is not None]
        ys = [v for v in values if v is not None]
        ax.plot(xs, ys, marker="o", markersize=3)
        ax.set_xlabel("center")
        ax.set_ylabel(name)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
