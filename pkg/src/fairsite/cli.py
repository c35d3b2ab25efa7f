"""``fairsite`` command line: gen-data, train, eval, sweep, plot, inspect.

Every command writes a ``<output>.run.json`` record next to its primary
output. The record holds the argv and the resolved configuration, so the
run can be repeated exactly.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import replace
from importlib import metadata
from pathlib import Path

import numpy as np
import yaml

from . import plotting
from .datagen import ConfigError, GeneratorConfig, generate_dataset
from .records import RACE_GROUPS, DataError, load_dataset, save_dataset
from .training import (
    CheckpointError,
    NumericError,
    TrainConfig,
    evaluate,
    evaluate_checkpoint,
    load_checkpoint,
    oracle_scorer,
    prepare_splits,
    random_scorer,
    save_checkpoint,
    set_execution_mode,
    train,
)

log = logging.getLogger("fairsite")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CACHE_ENV = "FAIRSITE_CACHE_DIR"


# -- configuration ---------------------------------------------------------------


def load_config_file(path, section: str) -> dict:
    """Read YAML or JSON. A top-level ``section`` key is used when present."""
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON ({exc})") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    if section in data:
        data = data[section]
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: section {section!r} must be a mapping")
    else:
        data = {k: v for k, v in data.items() if k not in ("generator", "train")}
    return data


def _train_config(args) -> TrainConfig:
    data = load_config_file(args.config, "train")
    overrides = {
        "seed": args.seed,
        "lam": getattr(args, "lam", None),
        "fusion_kind": getattr(args, "fusion", None),
        "dataset_variant": getattr(args, "variant", None),
        "objective": getattr(args, "objective", None),
        "epochs": getattr(args, "epochs", None),
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# -- run records -------------------------------------------------------------------


def version_string() -> str:
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    try:
        describe = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                                  cwd=Path(__file__).parent, timeout=5)
        if describe.returncode == 0 and describe.stdout.strip():
            return f"{version}+{describe.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return version


def write_run_record(primary: Path, command: str, config: dict, seed, outputs, started: float, argv) -> Path:
    record = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "version": version_string(),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "outputs": [str(p) for p in outputs],
    }
    path = Path(str(primary) + ".run.json")
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path


def _require_out(args) -> Path:
    if args.out is None:
        raise ConfigError(f"{args.command} needs --out")
    return Path(args.out)


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _cached_checkpoint_path(data_path, config: TrainConfig):
    root = os.environ.get(CACHE_ENV)
    if not root:
        return None
    key = hashlib.sha256(
        (_file_digest(data_path) + json.dumps(config.to_dict(), sort_keys=True)).encode()).hexdigest()[:20]
    path = Path(root) / "checkpoints" / f"{key}.zip"
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# -- commands ------------------------------------------------------------------------


def cmd_gen_data(args) -> list[Path]:
    out = _require_out(args)
    data = load_config_file(args.config, "generator")
    if args.seed is not None:
        data["seed"] = args.seed
    config = GeneratorConfig.from_dict(data)
    manifest, instances = generate_dataset(config)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = save_dataset(manifest, instances, out)
    print(f"wrote {manifest.record_count} instances to {out}")
    args.resolved_config = config.to_dict()
    return [out]


def _train_one(data_path, manifest, instances, config: TrainConfig, out: Path | None):
    """Train (or reuse a cached checkpoint) and write it to ``out`` when given."""
    cached = _cached_checkpoint_path(data_path, config)
    if cached is not None and cached.exists():
        log.info("reusing cached checkpoint %s", cached)
        ckpt = load_checkpoint(cached, manifest)
    else:
        train_set, val_set, _ = prepare_splits(instances, config)
        ckpt = train(train_set, val_set, config, manifest,
                     progress=lambda e, tr, va: log.info("epoch %d: train reward %.4f, val reward %.4f", e, tr, va))
        if cached is not None:
            save_checkpoint(ckpt, cached)
    if out is not None:
        save_checkpoint(ckpt, out)
    return ckpt


def cmd_train(args) -> list[Path]:
    out = _require_out(args)
    config = _train_config(args)
    manifest, instances = load_dataset(args.data)
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt = _train_one(args.data, manifest, instances, config, out)
    print(f"best epoch {ckpt.epoch} (validation reward {ckpt.val_reward:.4f}); checkpoint {out}")
    args.resolved_config = config.to_dict()
    return [out]


def _split_of(instances, config: TrainConfig, split: str):
    train_set, val_set, test_set = prepare_splits(instances, config)
    return {"train": train_set, "val": val_set, "test": test_set}[split]


def cmd_eval(args) -> list[Path]:
    out = _require_out(args)
    manifest, instances = load_dataset(args.data)
    if args.scorer == "model":
        if args.checkpoint is None:
            raise ConfigError("--scorer model needs --checkpoint")
        ckpt = load_checkpoint(args.checkpoint, manifest, force=args.force)
        config = ckpt.config
        report = evaluate_checkpoint(ckpt, _split_of(instances, config, args.split), args.label or "model")
    else:
        config = _train_config(args)
        scorer = oracle_scorer() if args.scorer == "oracle" else random_scorer(config.seed)
        report = evaluate(scorer, _split_of(instances, config, args.split), config.lam, args.label or args.scorer)
    out.parent.mkdir(parents=True, exist_ok=True)
    plotting.write_table([report], out)
    print(json.dumps({k: report[k] for k in ("relative_error_mean", "ndcg_mean", "entropy_mean")}))
    args.resolved_config = config.to_dict()
    return [out]


def _parse_lambdas(text: str) -> list[float]:
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"--lambdas must be comma-separated numbers, got {text!r}") from exc
    if not values:
        raise ConfigError("--lambdas is empty")
    return values


def cmd_sweep(args) -> list[Path]:
    out_dir = _require_out(args)
    base = _train_config(args)
    lambdas = _parse_lambdas(args.lambdas)
    manifest, instances = load_dataset(args.data)
    _, _, test_set = prepare_splits(instances, base)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, outputs = [], []
    label = args.label or f"{base.fusion_kind}-{base.dataset_variant}"
    for lam in sorted(lambdas):
        config = replace(base, lam=lam)
        ckpt_path = out_dir / f"checkpoint_lambda{lam:g}.zip"
        ckpt = _train_one(args.data, manifest, instances, config, ckpt_path)
        rows.append(evaluate_checkpoint(ckpt, test_set, label))
        outputs.append(ckpt_path)
        log.info("lambda %g: relative error %.4f, entropy %.4f", lam, rows[-1]["relative_error_mean"],
                 rows[-1]["entropy_mean"])
    table = out_dir / "sweep.csv"
    plotting.write_table(rows, table)
    outputs.append(table)
    outputs.extend(plotting.render_all({label: rows}, out_dir))
    for row in rows:
        print(f"lambda={row['lambda']:g} relative_error={row['relative_error_mean']:.4f} "
              f"ndcg={row['ndcg_mean']:.4f} entropy={row['entropy_mean']:.4f}")
    args.resolved_config = base.to_dict()
    args.record_anchor = table
    return outputs


def cmd_plot(args) -> list[Path]:
    out_dir = _require_out(args)
    series = {}
    for path in args.tables:
        rows = plotting.read_table(path)
        label = plotting._series_label(rows, Path(path).stem)
        while label in series:
            label += "'"
        series[label] = rows
    outputs = plotting.render_all(series, out_dir)
    for entry in plotting.race_table(series):
        cells = " ".join(f"{g}={entry[g]:.1f}" for g in RACE_GROUPS)
        print(f"{entry['series']} lambda={entry['lambda']:g}: {cells}")
    args.resolved_config = {"tables": [str(p) for p in args.tables]}
    args.record_anchor = out_dir / "tradeoff.png"
    return outputs


def dataset_summary(manifest, instances) -> dict:
    e = np.concatenate([inst.enrollments for inst in instances])
    masks = np.concatenate([inst.masks for inst in instances])
    return {
        "schema_version": manifest.schema_version,
        "dims_hash": manifest.dims_hash(),
        "instances": len(instances),
        "base_trials": len({inst.trial.trial_id for inst in instances}),
        "M": manifest.M,
        "K": manifest.K,
        "enrollment_mean": round(float(e.mean()), 4),
        "enrollment_std": round(float(e.std()), 4),
        "enrollment_max": int(e.max()),
        "modality_presence": [round(float(x), 4) for x in masks.mean(axis=0)],
    }


def cmd_inspect(args) -> list[Path]:
    manifest, instances = load_dataset(args.data)
    if not instances:
        raise DataError(f"{args.data}: dataset has no instances")
    summary = dataset_summary(manifest, instances)
    text = json.dumps(summary, indent=2) + "\n"
    sys.stdout.write(text)
    args.resolved_config = {}
    if args.out is None:
        return []
    Path(args.out).write_text(text)
    return [Path(args.out)]


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON configuration file")
    common.add_argument("--seed", type=int, help="overrides the seed in the configuration")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--threads", type=int, help="torch intra-op threads")
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True,
                        help="fixed execution mode for bitwise-reproducible results (default on)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fairsite", description="Fair clinical-trial site selection toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    p.set_defaults(func=cmd_gen_data)

    def training_flags(p):
        p.add_argument("--data", required=True, help="dataset file")
        p.add_argument("--lambda", dest="lam", type=float, help="fairness weight")
        p.add_argument("--fusion", choices=("mcat", "fc"))
        p.add_argument("--variant", choices=("missing", "full"))
        p.add_argument("--objective", choices=("reinforce", "regression"))
        p.add_argument("--epochs", type=int)

    p = sub.add_parser("train", parents=[common], help="train one model")
    training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint or a reference scorer")
    training_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--scorer", choices=("model", "oracle", "random"), default="model")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--label")
    p.add_argument("--force", action="store_true", help="load a checkpoint despite a dataset hash mismatch")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="train and evaluate across lambda values")
    training_flags(p)
    p.add_argument("--lambdas", default="0,0.5,1,2,4,8")
    p.add_argument("--label")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", parents=[common], help="render figures from sweep/eval tables")
    p.add_argument("tables", nargs="+")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("inspect", parents=[common], help="summarize a dataset")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        set_execution_mode(args.deterministic, args.threads)
        outputs = args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    anchor = getattr(args, "record_anchor", None) or (outputs[0] if outputs else None)
    if anchor is not None:
        write_run_record(anchor, args.command, args.resolved_config, args.seed, outputs, started, argv)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
