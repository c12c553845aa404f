"""Experiment configuration: one JSON document drives every command.

The JSON file is the source of truth; command-line flags only pick the
file and override seed or paths. Validation runs before any side effect,
and cross-field combinations that would otherwise fail deep inside a run
(soft vicinity with kappa = 0, guidance without an unconditional
pathway, a sampling chain longer than the schedule) are rejected here
with a message naming the field to fix.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .distill import AUGMENT_TOKENS, DistillConfig
from .errors import ConfigError
from .sampler import SamplerKind
from .train import TrainConfig

DATASET_TYPES = ("rotor", "count", "dir")
_ROTOR_PARAMS = {"n_angles": True, "per_angle": True, "size": False,
                 "theta_min": False, "theta_max": False}
_COUNT_PARAMS = {"max_count": True, "per_count": True, "size": False,
                 "odd_only": False, "overlap": False}
SHORT_ENCODINGS = ("cnn", "sinusoidal", "fourier")
STAGE_DIRS = ("dataset_dir", "embeddings_dir", "train_dir", "samples_dir",
              "distill_dir", "eval_dir")


def canonical_hash(obj) -> str:
    """sha256 over the canonical JSON form; key order never matters."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _check_keys(section: str, d: dict, allowed) -> None:
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(
            f"unknown keys in '{section}': {', '.join(unknown)} "
            f"(allowed: {', '.join(sorted(allowed))})")


def _section(doc: dict, name: str) -> dict:
    sub = doc.get(name, {})
    if not isinstance(sub, dict):
        raise ConfigError(f"'{name}' must be a JSON object, got {type(sub).__name__}")
    return sub


def _int(section: str, key: str, v, lo: int | None = None) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{section}.{key} must be an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(f"{section}.{key} must be >= {lo}, got {v}")
    return v


def _float(section: str, key: str, v, lo: float | None = None) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{section}.{key} must be a number, got {v!r}")
    v = float(v)
    if v != v or v in (float("inf"), float("-inf")):
        raise ConfigError(f"{section}.{key} must be finite, got {v}")
    if lo is not None and v < lo:
        raise ConfigError(f"{section}.{key} must be >= {lo}, got {v}")
    return v


def _choice(section: str, key: str, v, options) -> str:
    if v not in options:
        raise ConfigError(
            f"{section}.{key} must be one of {list(options)}, got {v!r}")
    return v


@dataclass
class DatasetSpec:
    type: str = "rotor"
    params: dict = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        _check_keys("dataset", d, ("type", "params", "seed"))
        typ = _choice("dataset", "type", d.get("type", "rotor"), DATASET_TYPES)
        params = d.get("params", {})
        if not isinstance(params, dict):
            raise ConfigError("dataset.params must be a JSON object")
        if typ == "dir":
            if params:
                raise ConfigError(
                    "dataset.params is meaningless for type 'dir'; the images "
                    "are read from paths.dataset_dir as-is")
        else:
            schema = _ROTOR_PARAMS if typ == "rotor" else _COUNT_PARAMS
            _check_keys("dataset.params", params, schema)
            missing = sorted(k for k, req in schema.items()
                             if req and k not in params)
            if missing:
                raise ConfigError(
                    f"dataset.params for type '{typ}' needs {', '.join(missing)}")
        return cls(type=typ, params=dict(params),
                   seed=_int("dataset", "seed", d.get("seed", 0)))


@dataclass
class ScheduleSection:
    T: int = 1000

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleSection":
        _check_keys("schedule", d, ("T",))
        return cls(T=_int("schedule", "T", d.get("T", 1000), lo=2))


@dataclass
class LabelspaceSection:
    m_kappa: float = 5.0

    @classmethod
    def from_dict(cls, d: dict) -> "LabelspaceSection":
        _check_keys("labelspace", d, ("m_kappa",))
        return cls(m_kappa=_float("labelspace", "m_kappa",
                                  d.get("m_kappa", 5.0), lo=0.0))


@dataclass
class DenoiserSection:
    base_channels: int = 64
    channel_mults: tuple[int, ...] = (1, 2, 4)
    num_res_blocks: int = 2

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserSection":
        _check_keys("denoiser", d, ("base_channels", "channel_mults",
                                    "num_res_blocks"))
        mults = d.get("channel_mults", [1, 2, 4])
        if (not isinstance(mults, (list, tuple)) or len(mults) == 0
                or any(isinstance(m, bool) or not isinstance(m, int) or m < 1
                       for m in mults)):
            raise ConfigError(
                f"denoiser.channel_mults must be a nonempty list of positive "
                f"integers, got {mults!r}")
        return cls(
            base_channels=_int("denoiser", "base_channels",
                               d.get("base_channels", 64), lo=8),
            channel_mults=tuple(mults),
            num_res_blocks=_int("denoiser", "num_res_blocks",
                                d.get("num_res_blocks", 2), lo=1))


@dataclass
class EmbeddingsSection:
    aux_epochs: int = 10
    mlp_steps: int = 600
    short_encoding: str = "cnn"

    @classmethod
    def from_dict(cls, d: dict) -> "EmbeddingsSection":
        _check_keys("embeddings", d, ("aux_epochs", "mlp_steps",
                                      "short_encoding"))
        return cls(
            aux_epochs=_int("embeddings", "aux_epochs",
                            d.get("aux_epochs", 10), lo=1),
            mlp_steps=_int("embeddings", "mlp_steps",
                           d.get("mlp_steps", 600), lo=1),
            short_encoding=_choice("embeddings", "short_encoding",
                                   d.get("short_encoding", "cnn"),
                                   SHORT_ENCODINGS))


@dataclass
class TrainSection:
    K: int = 1000
    m: int = 64
    p_drop: float = 0.1
    vicinity_mode: str = "hard"
    pred_type: str = "x0"
    lr: float = 1e-4
    seed: int = 0
    checkpoint_every: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSection":
        _check_keys("train", d, ("K", "m", "p_drop", "vicinity_mode",
                                 "pred_type", "lr", "seed", "checkpoint_every"))
        ce = d.get("checkpoint_every")
        out = cls(
            K=_int("train", "K", d.get("K", 1000), lo=0),
            m=_int("train", "m", d.get("m", 64), lo=1),
            p_drop=_float("train", "p_drop", d.get("p_drop", 0.1)),
            vicinity_mode=d.get("vicinity_mode", "hard"),
            pred_type=d.get("pred_type", "x0"),
            lr=_float("train", "lr", d.get("lr", 1e-4)),
            seed=_int("train", "seed", d.get("seed", 0)),
            checkpoint_every=None if ce is None
            else _int("train", "checkpoint_every", ce, lo=1))
        out.to_train_config()  # surface range/enum errors at load time
        return out

    def to_train_config(self, seed: int | None = None) -> TrainConfig:
        try:
            return TrainConfig(
                steps=self.K, batch_size=self.m, p_drop=self.p_drop,
                vicinity_mode=self.vicinity_mode, pred_type=self.pred_type,
                lr=self.lr, seed=self.seed if seed is None else seed,
                checkpoint_every=self.checkpoint_every)
        except ValueError as e:  # enum coercion failures
            raise ConfigError(f"train: {e}") from e


@dataclass
class SampleSection:
    T_prime: int = 50
    gamma: float = 1.5
    sampler: str = "ddim"
    n_per_label: int | None = None   # defaults to eval.n_per_center
    y_targets: tuple[float, ...] | None = None  # defaults to eval.centers
    seed: int | None = None          # defaults to train.seed

    @classmethod
    def from_dict(cls, d: dict) -> "SampleSection":
        _check_keys("sample", d, ("T_prime", "gamma", "sampler", "n_per_label",
                                  "y_targets", "seed"))
        try:
            SamplerKind(d.get("sampler", "ddim"))
        except ValueError as e:
            raise ConfigError(f"sample.sampler: {e}") from e
        yt = d.get("y_targets")
        if yt is not None:
            if not isinstance(yt, (list, tuple)) or len(yt) == 0:
                raise ConfigError("sample.y_targets must be a nonempty list "
                                  "of normalized labels (or null)")
            yt = tuple(_float("sample", "y_targets", y) for y in yt)
            if any(y < 0.0 or y > 1.0 for y in yt):
                raise ConfigError("sample.y_targets must lie in [0, 1]")
        npl = d.get("n_per_label")
        seed = d.get("seed")
        return cls(
            T_prime=_int("sample", "T_prime", d.get("T_prime", 50), lo=1),
            gamma=_float("sample", "gamma", d.get("gamma", 1.5)),
            sampler=d.get("sampler", "ddim"),
            n_per_label=None if npl is None
            else _int("sample", "n_per_label", npl, lo=1),
            y_targets=yt,
            seed=None if seed is None else _int("sample", "seed", seed))


@dataclass
class EvalSection:
    centers: tuple[float, ...] = (0.1, 0.3, 0.5, 0.7, 0.9)
    n_per_center: int = 50
    r_sfid: float = 0.05
    oracle_epochs: int = 10
    seed: int | None = None          # defaults to train.seed

    @classmethod
    def from_dict(cls, d: dict) -> "EvalSection":
        _check_keys("eval", d, ("centers", "n_per_center", "r_sfid",
                                "oracle_epochs", "seed"))
        centers = d.get("centers", [0.1, 0.3, 0.5, 0.7, 0.9])
        if not isinstance(centers, (list, tuple)) or len(centers) == 0:
            raise ConfigError("eval.centers must be a nonempty list")
        centers = tuple(_float("eval", "centers", c) for c in centers)
        if any(c < 0.0 or c > 1.0 for c in centers):
            raise ConfigError("eval.centers must lie in [0, 1]")
        if any(b <= a for a, b in zip(centers, centers[1:])):
            raise ConfigError("eval.centers must be strictly increasing")
        seed = d.get("seed")
        return cls(
            centers=centers,
            n_per_center=_int("eval", "n_per_center",
                              d.get("n_per_center", 50), lo=1),
            r_sfid=_float("eval", "r_sfid", d.get("r_sfid", 0.05), lo=0.0),
            oracle_epochs=_int("eval", "oracle_epochs",
                               d.get("oracle_epochs", 10), lo=1),
            seed=None if seed is None else _int("eval", "seed", seed))


@dataclass
class DistillSection:
    steps: int = 200
    w_D: float = 10.0
    w_G: float = 1.0
    policy: tuple[str, ...] = AUGMENT_TOKENS
    m: int = 64
    base_channels: int = 32
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    lr_fake: float = 1e-4
    d_updates: int = 2
    seed: int | None = None          # defaults to train.seed

    @classmethod
    def from_dict(cls, d: dict) -> "DistillSection":
        _check_keys("distill", d, ("steps", "w_D", "w_G", "policy", "m",
                                   "base_channels", "lr_g", "lr_d", "lr_fake",
                                   "d_updates", "seed"))
        policy = d.get("policy", list(AUGMENT_TOKENS))
        if not isinstance(policy, (list, tuple)):
            raise ConfigError("distill.policy must be a list of augmentation "
                              f"names, got {policy!r}")
        bad = sorted(set(policy) - set(AUGMENT_TOKENS))
        if bad:
            raise ConfigError(
                f"distill.policy has unknown augmentations {bad}; "
                f"known: {list(AUGMENT_TOKENS)}")
        seed = d.get("seed")
        out = cls(
            steps=_int("distill", "steps", d.get("steps", 200), lo=0),
            w_D=_float("distill", "w_D", d.get("w_D", 10.0)),
            w_G=_float("distill", "w_G", d.get("w_G", 1.0)),
            policy=tuple(policy),
            m=_int("distill", "m", d.get("m", 64), lo=1),
            base_channels=_int("distill", "base_channels",
                               d.get("base_channels", 32), lo=8),
            lr_g=_float("distill", "lr_g", d.get("lr_g", 2e-4)),
            lr_d=_float("distill", "lr_d", d.get("lr_d", 2e-4)),
            lr_fake=_float("distill", "lr_fake", d.get("lr_fake", 1e-4)),
            d_updates=_int("distill", "d_updates", d.get("d_updates", 2), lo=1),
            seed=None if seed is None else _int("distill", "seed", seed))
        if out.w_D <= 0 or out.w_G <= 0:
            raise ConfigError(
                f"distill.w_D and distill.w_G must be positive, "
                f"got {out.w_D}, {out.w_G}")
        out.to_distill_config("hard")  # surface range errors at load time
        return out

    def to_distill_config(self, vicinity_mode: str,
                          seed: int | None = None) -> DistillConfig:
        return DistillConfig(
            steps=self.steps, batch_size=self.m, vicinity_mode=vicinity_mode,
            lr_g=self.lr_g, lr_d=self.lr_d, lr_fake=self.lr_fake,
            d_updates=self.d_updates,
            seed=self.seed if seed is None else seed)


@dataclass
class PathsSection:
    workdir: Path = Path("runs/exp")
    dataset_dir: Path = None  # type: ignore[assignment]
    embeddings_dir: Path = None  # type: ignore[assignment]
    train_dir: Path = None  # type: ignore[assignment]
    samples_dir: Path = None  # type: ignore[assignment]
    distill_dir: Path = None  # type: ignore[assignment]
    eval_dir: Path = None  # type: ignore[assignment]

    def __post_init__(self):
        self.workdir = Path(self.workdir)
        for name in STAGE_DIRS:
            v = getattr(self, name)
            stage = name[:-len("_dir")]
            setattr(self, name, self.workdir / stage if v is None else Path(v))

    @classmethod
    def from_dict(cls, d: dict) -> "PathsSection":
        _check_keys("paths", d, ("workdir",) + STAGE_DIRS)
        kwargs = {}
        for key in ("workdir",) + STAGE_DIRS:
            if key in d:
                v = d[key]
                if not isinstance(v, str) or not v:
                    raise ConfigError(f"paths.{key} must be a nonempty string, "
                                      f"got {v!r}")
                kwargs[key] = v
        return cls(**kwargs)


TOP_KEYS = ("dataset", "schedule", "labelspace", "denoiser", "embeddings",
            "train", "sample", "eval", "distill", "paths")


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    labelspace: LabelspaceSection = field(default_factory=LabelspaceSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    embeddings: EmbeddingsSection = field(default_factory=EmbeddingsSection)
    train: TrainSection = field(default_factory=TrainSection)
    sample: SampleSection = field(default_factory=SampleSection)
    eval: EvalSection = field(default_factory=EvalSection)
    distill: DistillSection = field(default_factory=DistillSection)
    paths: PathsSection = field(default_factory=PathsSection)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        _check_keys("config", doc, TOP_KEYS)
        cfg = cls(
            dataset=DatasetSpec.from_dict(_section(doc, "dataset")),
            schedule=ScheduleSection.from_dict(_section(doc, "schedule")),
            labelspace=LabelspaceSection.from_dict(_section(doc, "labelspace")),
            denoiser=DenoiserSection.from_dict(_section(doc, "denoiser")),
            embeddings=EmbeddingsSection.from_dict(_section(doc, "embeddings")),
            train=TrainSection.from_dict(_section(doc, "train")),
            sample=SampleSection.from_dict(_section(doc, "sample")),
            eval=EvalSection.from_dict(_section(doc, "eval")),
            distill=DistillSection.from_dict(_section(doc, "distill")),
            paths=PathsSection.from_dict(_section(doc, "paths")))
        cfg.cross_validate()
        return cfg

    def cross_validate(self) -> None:
        """Rules spanning sections, checked before any side effect."""
        if self.train.vicinity_mode == "soft" and self.labelspace.m_kappa == 0:
            raise ConfigError(
                "train.vicinity_mode='soft' needs kappa > 0 (nu undefined at "
                "kappa=0); raise labelspace.m_kappa or switch vicinity_mode "
                "to hard/none")
        if self.sample.gamma != 1.0 and self.train.p_drop == 0.0:
            raise ConfigError(
                f"sample.gamma={self.sample.gamma} needs an unconditional "
                "pathway, but train.p_drop=0 never trains one; set "
                "train.p_drop > 0 or sample at gamma=1")
        if self.sample.T_prime > self.schedule.T:
            raise ConfigError(
                f"sample.T_prime={self.sample.T_prime} exceeds "
                f"schedule.T={self.schedule.T}")

    def to_dict(self) -> dict:
        """Fully resolved document: defaults filled in, tuples as lists."""
        return {
            "dataset": {"type": self.dataset.type,
                        "params": dict(self.dataset.params),
                        "seed": self.dataset.seed},
            "schedule": {"T": self.schedule.T},
            "labelspace": {"m_kappa": self.labelspace.m_kappa},
            "denoiser": {"base_channels": self.denoiser.base_channels,
                         "channel_mults": list(self.denoiser.channel_mults),
                         "num_res_blocks": self.denoiser.num_res_blocks},
            "embeddings": {"aux_epochs": self.embeddings.aux_epochs,
                           "mlp_steps": self.embeddings.mlp_steps,
                           "short_encoding": self.embeddings.short_encoding},
            "train": {"K": self.train.K, "m": self.train.m,
                      "p_drop": self.train.p_drop,
                      "vicinity_mode": self.train.vicinity_mode,
                      "pred_type": self.train.pred_type,
                      "lr": self.train.lr, "seed": self.train.seed,
                      "checkpoint_every": self.train.checkpoint_every},
            "sample": {"T_prime": self.sample.T_prime,
                       "gamma": self.sample.gamma,
                       "sampler": self.sample.sampler,
                       "n_per_label": self.sample.n_per_label,
                       "y_targets": None if self.sample.y_targets is None
                       else list(self.sample.y_targets),
                       "seed": self.sample.seed},
            "eval": {"centers": list(self.eval.centers),
                     "n_per_center": self.eval.n_per_center,
                     "r_sfid": self.eval.r_sfid,
                     "oracle_epochs": self.eval.oracle_epochs,
                     "seed": self.eval.seed},
            "distill": {"steps": self.distill.steps, "w_D": self.distill.w_D,
                        "w_G": self.distill.w_G,
                        "policy": list(self.distill.policy),
                        "m": self.distill.m,
                        "base_channels": self.distill.base_channels,
                        "lr_g": self.distill.lr_g, "lr_d": self.distill.lr_d,
                        "lr_fake": self.distill.lr_fake,
                        "d_updates": self.distill.d_updates,
                        "seed": self.distill.seed},
            "paths": {"workdir": self.paths.workdir.as_posix(),
                      **{name: getattr(self.paths, name).as_posix()
                         for name in STAGE_DIRS}},
        }

    def config_hash(self) -> str:
        """Identity of the resolved configuration. Two files that differ
        only by spelling out a default hash the same."""
        return canonical_hash(self.to_dict())


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"no config file at {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    return ExperimentConfig.from_dict(doc)
