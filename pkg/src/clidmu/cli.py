"""Command-line front end: deterministic experiment orchestration.

Subcommands::

    clidmu generate-data --config FILE --out DIR
    clidmu train         --config FILE --out DIR [--meta-objective ...]
    clidmu correlate     --config FILE --out DIR
    clidmu ensemble-predict --snapshots DIR --data CSV --out DIR

Configuration is a flat ``key = value`` text file ('#' starts a comment);
any flag given on the command line overrides the file. Unknown keys are
rejected. Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .data import LabeledDataset, NoiseSpec, apply_noise, generate_blobs, read_csv, write_csv
from .ensemble import bound_check, ensemble_predict, load_snapshot_dir, write_snapshot
from .evaluation import (CorrelationStudyConfig, correlation_study, write_correlation_csv,
                         write_metrics_csv)
from .metaloop import NonfiniteError, TrainConfig, run_training

TEST_SEED_OFFSET = 500
NOISE_SEED_OFFSET = 1000

META_SET_FLAGS = {"random": "random_noisy", "balanced": "class_balanced_noisy",
                  "pseudo-clean": "pseudo_clean_gmm", "oracle-clean": "oracle_clean"}
SG_FLAGS = {"target-q": "target_q", "target-e": "target_e", "none": "none"}


class ConfigError(ValueError):
    """Bad or unknown configuration input; maps to exit code 2."""


@dataclass
class ExperimentConfig:
    """Every knob of the CLI, one flat namespace."""

    seed: int = 0
    out_dir: str = "out"
    # dataset
    n_samples: int = 4000
    dim: int = 8
    classes: int = 4
    class_sep: float = 2.0
    test_samples: int = 1000
    noise_kind: str = "symmetric"
    noise_rate: float = 0.4
    noise_std: float = 0.1
    data_csv: str | None = None
    test_csv: str | None = None
    # model
    hidden_sizes: tuple = (32, 32)
    meta_hidden: int = 100
    # training
    alpha: float = 0.1
    gamma: float = 0.05
    tau: float = 0.5
    batch_size: int = 100
    meta_batch_size: int = 100
    epochs: int = 30
    max_iters: int | None = None
    snapshots: int = 5
    meta_objective: str = "clid"
    meta_set_strategy: str = "random_noisy"
    meta_size: int = 1000
    warmup_epochs: int = 10
    sg_mode: str = "target_q"
    eval_cap: int = 2048
    setting: str = "run"
    # correlation study
    rates: tuple = (0.0, 0.2, 0.4, 0.6)

    def validate(self):
        if self.n_samples < self.classes or self.dim < 2 or self.classes < 2:
            raise ConfigError("need n_samples >= classes >= 2 and dim >= 2")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ConfigError(f"noise_rate must be in [0, 1], got {self.noise_rate}")
        if self.noise_kind not in NoiseSpec.VALID:
            raise ConfigError(f"noise_kind must be one of {NoiseSpec.VALID}")
        if self.test_samples < 2:
            raise ConfigError("test_samples must be >= 2")
        try:
            self.train_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self) -> TrainConfig:
        return TrainConfig(alpha=self.alpha, gamma=self.gamma, tau=self.tau,
                           batch_size=self.batch_size,
                           meta_batch_size=self.meta_batch_size, epochs=self.epochs,
                           max_iters=self.max_iters, snapshots=self.snapshots,
                           meta_objective=self.meta_objective,
                           meta_set_strategy=self.meta_set_strategy,
                           meta_size=self.meta_size, warmup_epochs=self.warmup_epochs,
                           sg_mode=self.sg_mode, seed=self.seed,
                           hidden_sizes=self.hidden_sizes, meta_hidden=self.meta_hidden,
                           eval_cap=self.eval_cap, setting=self.setting)


def _parse_int(v):
    return int(v)


def _parse_opt_int(v):
    return None if v == "" else int(v)


def _parse_float(v):
    return float(v)


def _parse_str(v):
    return v


def _parse_opt_str(v):
    return None if v == "" else v


def _parse_int_tuple(v):
    parts = [p.strip() for p in str(v).split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a comma-separated list of integers")
    return tuple(int(p) for p in parts)


def _parse_float_tuple(v):
    parts = [p.strip() for p in str(v).split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a comma-separated list of floats")
    return tuple(float(p) for p in parts)


_PARSERS = {
    "seed": _parse_int, "out_dir": _parse_str,
    "n_samples": _parse_int, "dim": _parse_int, "classes": _parse_int,
    "class_sep": _parse_float, "test_samples": _parse_int,
    "noise_kind": _parse_str, "noise_rate": _parse_float, "noise_std": _parse_float,
    "data_csv": _parse_opt_str, "test_csv": _parse_opt_str,
    "hidden_sizes": _parse_int_tuple, "meta_hidden": _parse_int,
    "alpha": _parse_float, "gamma": _parse_float, "tau": _parse_float,
    "batch_size": _parse_int, "meta_batch_size": _parse_int, "epochs": _parse_int,
    "max_iters": _parse_opt_int, "snapshots": _parse_int,
    "meta_objective": _parse_str, "meta_set_strategy": _parse_str,
    "meta_size": _parse_int, "warmup_epochs": _parse_int, "sg_mode": _parse_str,
    "eval_cap": _parse_int, "setting": _parse_str, "rates": _parse_float_tuple,
}


def parse_config_file(path) -> dict:
    """Flat ``key = value`` lines; '#' comments; unknown keys rejected."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}: line {lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in _PARSERS:
                raise ConfigError(f"{path}: line {lineno}: unknown key {key!r}")
            try:
                values[key] = _PARSERS[key](value)
            except ValueError as exc:
                raise ConfigError(f"{path}: line {lineno}: bad value for {key}: {exc}") from None
    return values


def build_config(args) -> ExperimentConfig:
    values = parse_config_file(args.config) if args.config else {}
    cfg = ExperimentConfig(**values)
    # command-line overrides
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "meta_objective", None):
        cfg.meta_objective = args.meta_objective
    if getattr(args, "meta_set", None):
        cfg.meta_set_strategy = META_SET_FLAGS[args.meta_set]
    if getattr(args, "sg", None):
        cfg.sg_mode = SG_FLAGS[args.sg]
    cfg.validate()
    return cfg


def _dataset_for(cfg: ExperimentConfig) -> LabeledDataset:
    if cfg.data_csv:
        return read_csv(cfg.data_csv)
    clean = generate_blobs(cfg.seed, cfg.n_samples, cfg.dim, cfg.classes, cfg.class_sep)
    spec = NoiseSpec(cfg.noise_kind, cfg.noise_rate, cfg.seed + NOISE_SEED_OFFSET,
                     cfg.noise_std)
    return apply_noise(clean, spec)


def _test_set_for(cfg: ExperimentConfig) -> LabeledDataset:
    if cfg.test_csv:
        return read_csv(cfg.test_csv)
    return generate_blobs(cfg.seed + TEST_SEED_OFFSET, cfg.test_samples, cfg.dim,
                          cfg.classes, cfg.class_sep)


def _config_echo(cfg: ExperimentConfig) -> dict:
    echo = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        echo[f.name] = list(v) if isinstance(v, tuple) else v
    return echo


def _library_version() -> str:
    try:
        from importlib.metadata import version

        return version("clidmu")
    except Exception:
        return "unknown"


@dataclass
class RunManifest:
    """Reproducibility record written alongside every command's outputs."""

    config: dict
    seed: int
    version: str
    started_utc: str
    finished_utc: str | None = None
    outputs: list = field(default_factory=list)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.__dict__, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def cmd_generate_data(args) -> int:
    cfg = build_config(args)
    ds = _dataset_for(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data_path = out / "dataset.csv"
    write_csv(ds, data_path)
    sidecar = {"seed": cfg.seed, "n_samples": cfg.n_samples, "dim": cfg.dim,
               "classes": cfg.classes, "class_sep": cfg.class_sep,
               "noise_kind": cfg.noise_kind, "noise_rate": cfg.noise_rate,
               "noise_std": cfg.noise_std, "version": _library_version()}
    with open(out / "dataset.meta.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {data_path}")
    return 0


def cmd_train(args) -> int:
    cfg = build_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(_config_echo(cfg), cfg.seed, _library_version(), _now())
    manifest.write(out / "manifest.json")
    train_set = _dataset_for(cfg)
    eval_set = _test_set_for(cfg)
    try:
        store, rows = run_training(cfg.train_config(), train_set, eval_set=eval_set)
    except NonfiniteError as exc:
        with open(out / "abort_state.txt", "w", encoding="utf-8") as fh:
            fh.write(f"aborted: {exc}\nconfig: {json.dumps(_config_echo(cfg), sort_keys=True)}\n")
        print(f"error: {exc}", file=sys.stderr)
        return 3
    metrics_path = out / "metrics.csv"
    write_metrics_csv(rows, metrics_path)
    snap_dir = out / "snapshots"
    snap_dir.mkdir(exist_ok=True)
    outputs = ["manifest.json", "metrics.csv"]
    for snap in store.sorted_entries():
        name = f"epoch{snap.epoch:04d}.snapshot"
        write_snapshot(snap, snap_dir / name)
        outputs.append(f"snapshots/{name}")
    manifest.finished_utc = _now()
    manifest.outputs = outputs
    manifest.write(out / "manifest.json")
    print(f"wrote {metrics_path} and {len(store)} snapshots")
    return 0


def cmd_correlate(args) -> int:
    cfg = build_config(args)
    if len(cfg.rates) < 3:
        print("error: correlation study needs at least 3 noise settings "
              f"(rates = {cfg.rates})", file=sys.stderr)
        return 2
    study = CorrelationStudyConfig(seed=cfg.seed, n_samples=cfg.n_samples, dim=cfg.dim,
                                   n_classes=cfg.classes, class_sep=cfg.class_sep,
                                   test_samples=cfg.test_samples, rates=cfg.rates,
                                   noise_kind=cfg.noise_kind, epochs=cfg.epochs,
                                   hidden_sizes=cfg.hidden_sizes, alpha=cfg.alpha,
                                   batch_n=cfg.batch_size, tau=cfg.tau,
                                   eval_cap=cfg.eval_cap)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(_config_echo(cfg), cfg.seed, _library_version(), _now())
    manifest.write(out / "manifest.json")
    report, rows = correlation_study(study)
    write_correlation_csv(report, out / "correlation.csv")
    write_metrics_csv(rows, out / "metrics.csv")
    manifest.finished_utc = _now()
    manifest.outputs = ["manifest.json", "correlation.csv", "metrics.csv"]
    manifest.write(out / "manifest.json")
    print(f"wrote {out / 'correlation.csv'}")
    return 0


def cmd_ensemble_predict(args) -> int:
    try:
        store = load_snapshot_dir(args.snapshots)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    ds = read_csv(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    F = ensemble_predict(store, ds.X)
    pred = np.argmax(F, axis=1)
    with open(out / "predictions.csv", "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index"] + [f"prob_{k}" for k in range(ds.n_classes)]
                        + ["predicted", "true"])
        for i in range(ds.n_samples):
            writer.writerow([str(i)] + [f"{v:.17g}" for v in F[i]]
                            + [str(int(pred[i])), str(int(ds.y_clean[i]))])
    result = bound_check(store, ds.X, ds.y_clean)
    with open(out / "bound_report.csv", "w", newline="", encoding="ascii") as fh:
        fh.write("lhs,rhs,holds\n")
        fh.write(f"{result.lhs:.17g},{result.rhs:.17g},{str(result.holds).lower()}\n")
    print(f"wrote {out / 'predictions.csv'}; bound holds: {result.holds}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clidmu",
                                     description="Divergence-guided meta reweighting "
                                                 "for noisy-label training")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="override the seed")

    p_gen = sub.add_parser("generate-data", help="write a noisy dataset CSV + sidecar")
    common(p_gen)
    p_train = sub.add_parser("train", help="run the full training loop")
    common(p_train)
    p_train.add_argument("--meta-objective", choices=["clid", "ce", "mae"])
    p_train.add_argument("--meta-set", choices=sorted(META_SET_FLAGS))
    p_train.add_argument("--sg", choices=sorted(SG_FLAGS))
    p_corr = sub.add_parser("correlate", help="cross-noise correlation study")
    common(p_corr)
    p_ens = sub.add_parser("ensemble-predict",
                           help="average snapshot predictions over a dataset")
    p_ens.add_argument("--snapshots", required=True, help="directory of *.snapshot files")
    p_ens.add_argument("--data", required=True, help="dataset CSV")
    p_ens.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    handlers = {"generate-data": cmd_generate_data, "train": cmd_train,
                "correlate": cmd_correlate, "ensemble-predict": cmd_ensemble_predict}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NonfiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
