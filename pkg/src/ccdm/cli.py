"""Command-line pipeline for the diffusion experiments.

Verbs: make-dataset, train-embeddings, train, sample, distill, eval,
plot. One JSON experiment file drives all of them; flags only pick the
file and override seed or paths (--seed beats CCDM_SEED beats the
config; --workers beats CCDM_WORKERS). Each command validates the full
config before any side effect, writes its artifacts under the stage
directory from the paths section, drops a provenance.json with the
config hash, code version, and effective seed, and never mutates its
inputs, so reruns with identical inputs reproduce identical artifacts.

Exit codes: 0 success, 2 config error, 3 missing prerequisite artifact,
4 numerical fault.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ExperimentConfig, PathsSection, canonical_hash, load_config
from .data import load_dataset, make_count_dataset, make_rotor_dataset, save_dataset
from .denoiser import build_unet, load_denoiser, save_denoiser
from .distill import GENERATOR_FILE, distill_loop, init_distill, save_generator
from .embednet import EmbeddingNets, train_embedding_nets
from .errors import ConfigError, MissingArtifactError, NumericalFault
from .labelspace import LabelSpace, build_labelspace
from .metrics import (EvalProtocol, EvalReport, evaluate, make_feature_extractor,
                      plot_report, train_oracle_classifier, train_oracle_regressor)
from .sampler import SampleRequest, assigned_labels, sample, save_images
from .schedule import make_cosine_schedule
from .train import train_loop

MODEL_FILE = "model.pt"
TRACE_FILE = "trace.ndjson"
REPORT_FILE = "report.json"


def _write_provenance(outdir: Path, cfg: ExperimentConfig, seed: int,
                      command: str) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    record = {"command": command, "config_hash": cfg.config_hash(),
              "code_version": __version__, "seed": seed}
    with open(outdir / "provenance.json", "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)


def _seed_for(seed_override: int | None, *candidates: int | None) -> int:
    """First non-None of (override, section seeds...)."""
    if seed_override is not None:
        return seed_override
    for c in candidates:
        if c is not None:
            return c
    raise AssertionError("no seed candidate")


def _load_real_dataset(cfg: ExperimentConfig):
    try:
        return load_dataset(cfg.paths.dataset_dir)
    except MissingArtifactError as e:
        if cfg.dataset.type == "dir":
            raise MissingArtifactError(
                f"{e}; dataset.type='dir' expects an existing image directory "
                f"at paths.dataset_dir") from e
        raise MissingArtifactError(f"{e}; run `ccdm make-dataset` first") from e


def _load_nets(cfg: ExperimentConfig) -> EmbeddingNets:
    try:
        return EmbeddingNets.load(cfg.paths.embeddings_dir)
    except MissingArtifactError as e:
        raise MissingArtifactError(
            f"{e}; run `ccdm train-embeddings` first") from e


def _load_checkpoint(path: Path):
    try:
        return load_denoiser(path)
    except MissingArtifactError as e:
        raise MissingArtifactError(f"{e}; run `ccdm train` first") from e


def _space_from_meta(m: dict) -> LabelSpace:
    """Rebuild the label geometry a checkpoint was trained against; enough
    for denormalization and vicinal parameters, without the dataset."""
    grid = np.array([0.0, 1.0])
    return LabelSpace(raw_min=m["raw_min"], raw_max=m["raw_max"],
                      labels=grid, distinct=grid, sigma_delta=m["sigma_delta"],
                      m_kappa=m["m_kappa"], kappa=m["kappa"], nu=m["nu"])


def cmd_make_dataset(cfg: ExperimentConfig, seed_override: int | None = None) -> Path:
    if cfg.dataset.type == "dir":
        raise ConfigError("dataset.type='dir' points at existing images; "
                          "nothing to make")
    seed = _seed_for(seed_override, cfg.dataset.seed)
    maker = make_rotor_dataset if cfg.dataset.type == "rotor" else make_count_dataset
    try:
        ds = maker(seed=seed, **cfg.dataset.params)
    except ValueError as e:
        raise ConfigError(f"dataset.params: {e}") from e
    out = save_dataset(ds, cfg.paths.dataset_dir)
    _write_provenance(out, cfg, seed, "make-dataset")
    return out


def cmd_train_embeddings(cfg: ExperimentConfig,
                         seed_override: int | None = None) -> Path:
    seed = _seed_for(seed_override, cfg.train.seed)
    ds = _load_real_dataset(cfg)
    space = build_labelspace(ds.raw_labels, cfg.labelspace.m_kappa)
    nets = train_embedding_nets(
        ds.images, space.labels, space.distinct, ds.image_shape,
        aux_epochs=cfg.embeddings.aux_epochs, mlp_steps=cfg.embeddings.mlp_steps,
        short_encoding=cfg.embeddings.short_encoding, seed=seed)
    outdir = cfg.paths.embeddings_dir
    nets.save(outdir)
    _write_provenance(outdir, cfg, seed, "train-embeddings")
    return outdir


def cmd_train(cfg: ExperimentConfig, seed_override: int | None = None) -> Path:
    seed = _seed_for(seed_override, cfg.train.seed)
    ds = _load_real_dataset(cfg)
    space = build_labelspace(ds.raw_labels, cfg.labelspace.m_kappa)
    nets = _load_nets(cfg)
    schedule = make_cosine_schedule(cfg.schedule.T)
    tc = cfg.train.to_train_config(seed=seed)
    torch.manual_seed(seed)  # weight init; the loop uses its own streams
    try:
        f = build_unet(ds.image_shape, base_channels=cfg.denoiser.base_channels,
                       channel_mults=cfg.denoiser.channel_mults,
                       pred_type=tc.pred_type,
                       num_res_blocks=cfg.denoiser.num_res_blocks,
                       T=cfg.schedule.T)
    except ValueError as e:
        raise ConfigError(f"denoiser: {e}") from e
    outdir = cfg.paths.train_dir
    outdir.mkdir(parents=True, exist_ok=True)
    f, _ = train_loop(f, ds.images, space.labels, space, nets, schedule, tc,
                      out_dir=outdir if tc.checkpoint_every else None,
                      trace_path=outdir / TRACE_FILE)
    save_denoiser(f, outdir / MODEL_FILE, schedule.meta(), space.meta(),
                  null_short=nets.null_short,
                  extra={"config_hash": cfg.config_hash()})
    _write_provenance(outdir, cfg, seed, "train")
    return outdir


def cmd_sample(cfg: ExperimentConfig, seed_override: int | None = None,
               checkpoint: str | Path | None = None) -> Path:
    seed = _seed_for(seed_override, cfg.sample.seed, cfg.train.seed)
    ckpt = Path(checkpoint) if checkpoint else cfg.paths.train_dir / MODEL_FILE
    f, meta, null_short = _load_checkpoint(ckpt)
    if f.T != cfg.schedule.T:
        raise ConfigError(
            f"checkpoint {ckpt} was trained with T={f.T} but the config says "
            f"schedule.T={cfg.schedule.T}; fix the config or retrain")
    nets = _load_nets(cfg)
    if null_short is not None:
        with torch.no_grad():
            nets.null_short.copy_(null_short)
    space = _space_from_meta(meta["labelspace"])
    targets = (cfg.eval.centers if cfg.sample.y_targets is None
               else cfg.sample.y_targets)
    n_per = (cfg.eval.n_per_center if cfg.sample.n_per_label is None
             else cfg.sample.n_per_label)
    req = SampleRequest(y_targets=np.asarray(targets, dtype=np.float64),
                        n_per_label=n_per, T_prime=cfg.sample.T_prime,
                        gamma=cfg.sample.gamma, seed=seed,
                        sampler=cfg.sample.sampler)
    images = sample(f, nets, make_cosine_schedule(cfg.schedule.T), req)
    out = save_images(images, assigned_labels(req), space, cfg.paths.samples_dir,
                      provenance={"type": "samples",
                                  "params": {"T_prime": req.T_prime,
                                             "gamma": req.gamma,
                                             "sampler": req.sampler.value,
                                             "checkpoint": str(ckpt)},
                                  "seed": seed})
    _write_provenance(out, cfg, seed, "sample")
    return out


def cmd_distill(cfg: ExperimentConfig, seed_override: int | None = None) -> Path:
    seed = _seed_for(seed_override, cfg.distill.seed, cfg.train.seed)
    ds = _load_real_dataset(cfg)
    space = build_labelspace(ds.raw_labels, cfg.labelspace.m_kappa)
    nets = _load_nets(cfg)
    f, _, null_short = _load_checkpoint(cfg.paths.train_dir / MODEL_FILE)
    if null_short is not None:
        with torch.no_grad():
            nets.null_short.copy_(null_short)
    schedule = make_cosine_schedule(cfg.schedule.T)
    state = init_distill(f, seed=seed, w_D=cfg.distill.w_D, w_G=cfg.distill.w_G,
                         policy=cfg.distill.policy,
                         base_channels=cfg.distill.base_channels)
    dc = cfg.distill.to_distill_config(cfg.train.vicinity_mode, seed=seed)
    outdir = cfg.paths.distill_dir
    outdir.mkdir(parents=True, exist_ok=True)
    state, _ = distill_loop(state, ds.images, space.labels, space, nets,
                            schedule, dc, trace_path=outdir / TRACE_FILE)
    save_generator(state, outdir / GENERATOR_FILE, space,
                   extra={"config_hash": cfg.config_hash()})
    _write_provenance(outdir, cfg, seed, "distill")
    return outdir


def cmd_eval(cfg: ExperimentConfig, real_dir: str | Path | None = None,
             fake_dir: str | Path | None = None,
             allow_hash_mismatch: bool = False,
             seed_override: int | None = None) -> EvalReport:
    seed = _seed_for(seed_override, cfg.eval.seed, cfg.train.seed)
    if real_dir is None:
        real = _load_real_dataset(cfg)
    else:
        real = load_dataset(real_dir)
    if fake_dir is None:
        try:
            fake = load_dataset(cfg.paths.samples_dir)
        except MissingArtifactError as e:
            raise MissingArtifactError(f"{e}; run `ccdm sample` first") from e
    else:
        fake = load_dataset(fake_dir)
    space = build_labelspace(real.raw_labels, cfg.labelspace.m_kappa)

    ckpt = cfg.paths.train_dir / MODEL_FILE
    if ckpt.exists():
        _, meta, _ = load_denoiser(ckpt)
        mismatched = []
        if canonical_hash(meta["schedule"]) != canonical_hash(
                make_cosine_schedule(cfg.schedule.T).meta()):
            mismatched.append("schedule")
        if canonical_hash(meta["labelspace"]) != canonical_hash(space.meta()):
            mismatched.append("labelspace")
        if mismatched and not allow_hash_mismatch:
            raise ConfigError(
                f"checkpoint {ckpt} disagrees with the config on "
                f"{' and '.join(mismatched)} (hash mismatch); fix the config "
                "or pass --allow-hash-mismatch to evaluate anyway")

    regressor = train_oracle_regressor(real.images, space.labels,
                                       epochs=cfg.eval.oracle_epochs, seed=seed)
    classifier = None
    if real.class_tags is not None:
        classifier = train_oracle_classifier(real.images, real.class_tags,
                                             epochs=cfg.eval.oracle_epochs,
                                             seed=seed)
    protocol = EvalProtocol(centers=np.asarray(cfg.eval.centers),
                            n_per_center=cfg.eval.n_per_center,
                            r_sfid=cfg.eval.r_sfid,
                            feature_extractor=make_feature_extractor(regressor),
                            oracle_regressor=regressor,
                            oracle_classifier=classifier)
    fake_norm = np.clip(space.normalize(fake.raw_labels), 0.0, 1.0)
    report = evaluate(protocol, real.images, space.labels, fake.images,
                      fake_norm, space)
    report.metadata["config_hash"] = cfg.config_hash()
    report.metadata["seed"] = seed
    outdir = cfg.paths.eval_dir
    report.to_json(outdir / REPORT_FILE)
    report.to_csv(outdir / "report.csv")
    plot_report(report, outdir / "metrics.png")
    _write_provenance(outdir, cfg, seed, "eval")
    return report


def cmd_plot(cfg: ExperimentConfig, report_path: str | Path | None = None,
             out_path: str | Path | None = None) -> Path:
    rp = Path(report_path) if report_path else cfg.paths.eval_dir / REPORT_FILE
    if not rp.is_file():
        raise MissingArtifactError(
            f"no evaluation report at {rp}; run `ccdm eval` first")
    report = EvalReport.from_json(rp)
    out = Path(out_path) if out_path else rp.with_name("metrics.png")
    return plot_report(report, out)


def _seed_override_from(args: argparse.Namespace) -> int | None:
    if args.seed is not None:
        return args.seed
    raw = os.environ.get("CCDM_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"CCDM_SEED must be an integer, got {raw!r}") from None


def _configure_workers(flag: int | None) -> None:
    raw = flag if flag is not None else os.environ.get("CCDM_WORKERS")
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(
            f"CCDM_WORKERS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"workers must be >= 1, got {n}")
    torch.set_num_threads(n)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ccdm",
        description="Continuous-label conditional diffusion pipeline.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name: str, text: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=text, description=text)
        sp.add_argument("--config", required=True, metavar="JSON",
                        help="experiment configuration file")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config seed (beats CCDM_SEED)")
        sp.add_argument("--workers", type=int, default=None,
                        help="cap internal parallelism (beats CCDM_WORKERS)")
        sp.add_argument("--workdir", default=None,
                        help="re-root every stage directory")
        return sp

    add("make-dataset", "render the synthetic dataset into paths.dataset_dir")
    add("train-embeddings", "train the label embedding networks")
    add("train", "train the conditional denoiser")
    sp = add("sample", "draw images from a trained denoiser")
    sp.add_argument("--checkpoint", default=None,
                    help="denoiser checkpoint (default: train dir model)")
    add("distill", "distill the denoiser into a one-step generator")
    sp = add("eval", "score generated images against the real dataset")
    sp.add_argument("--real-dir", default=None,
                    help="real image directory (default: paths.dataset_dir)")
    sp.add_argument("--fake-dir", default=None,
                    help="generated image directory (default: paths.samples_dir)")
    sp.add_argument("--allow-hash-mismatch", action="store_true",
                    help="evaluate even if the checkpoint was trained under a "
                         "different schedule or label space")
    sp = add("plot", "re-render the metric plots from a saved report")
    sp.add_argument("--report", default=None,
                    help="report JSON (default: eval dir report)")
    sp.add_argument("--out", default=None,
                    help="output PNG (default: next to the report)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _configure_workers(args.workers)
        cfg = load_config(args.config)
        if args.workdir:
            cfg.paths = PathsSection(workdir=args.workdir)
        seed = _seed_override_from(args)
        if args.command == "make-dataset":
            out = cmd_make_dataset(cfg, seed)
            print(f"dataset written to {out}")
        elif args.command == "train-embeddings":
            out = cmd_train_embeddings(cfg, seed)
            print(f"embeddings written to {out}")
        elif args.command == "train":
            out = cmd_train(cfg, seed)
            print(f"denoiser written to {out / MODEL_FILE}")
        elif args.command == "sample":
            out = cmd_sample(cfg, seed, checkpoint=args.checkpoint)
            print(f"samples written to {out}")
        elif args.command == "distill":
            out = cmd_distill(cfg, seed)
            print(f"generator written to {out / GENERATOR_FILE}")
        elif args.command == "eval":
            report = cmd_eval(cfg, real_dir=args.real_dir,
                              fake_dir=args.fake_dir,
                              allow_hash_mismatch=args.allow_hash_mismatch,
                              seed_override=seed)
            div = ("n/a" if report.diversity_mean is None
                   else f"{report.diversity_mean:.4f}")
            print(f"SFID {report.sfid_mean:.6f}  "
                  f"Label Score {report.label_score_mean:.6f}  "
                  f"Diversity {div}")
            print(f"report written to {cfg.paths.eval_dir / REPORT_FILE}")
        elif args.command == "plot":
            out = cmd_plot(cfg, report_path=args.report, out_path=args.out)
            print(f"plot written to {out}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except MissingArtifactError as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return 3
    except NumericalFault as e:
        print(f"numerical fault: {e}", file=sys.stderr)
        return 4
    return 0
