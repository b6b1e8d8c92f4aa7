"""Command-line interface.

Subcommands: prepare, train, evaluate, synth, ablate. Every command
writes into an output directory containing exactly one manifest.json and
refuses to reuse a directory that already has one unless --force is
given. Exit codes: 0 ok, 2 data/config error, 3 training error, 4
evaluation error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__
from .data import (dataset_stats, expand_kc_level, filter_and_truncate,
                   infer_dims, kfold_split, load_interactions, load_prepared,
                   save_prepared, select_sequences)
from .errors import AtdktError, ConfigError, DataError, EvaluationError
from .evaluation import MultiStepConfig, multistep_eval, one_step_eval
from .metrics import accuracy, auc, save_records
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .synth import SynthSpec, generate, save_dataset, save_truth
from .training import TrainConfig, ablation_run, run_cv, train_fold


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            h.update(block)
    return h.hexdigest()


def _sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _claim_out_dir(out: Path, force: bool) -> None:
    """Refuse to write into a directory another run already owns."""
    if (out / "manifest.json").exists() and not force:
        raise DataError(f"{out} already contains a run; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def _write_manifest(out: Path, command: str, config: dict, data_hash: str,
                    seed: int) -> None:
    manifest = {
        "command": command,
        "config_hash": _sha256_text(json.dumps(config, sort_keys=True)),
        "data_hash": data_hash,
        "seed": seed,
        "engine_version": __version__,
        "created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _load_json(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def _resolve_configs(args, sequences) -> tuple[ModelConfig, TrainConfig]:
    raw = _load_json(getattr(args, "config", None))
    model_kw = dict(raw.get("model", {}))
    train_kw = dict(raw.get("train", {}))
    if "n_kcs" not in model_kw or "n_questions" not in model_kw:
        n_kcs, n_questions = infer_dims(sequences)
        model_kw.setdefault("n_kcs", n_kcs)
        model_kw.setdefault("n_questions", n_questions)
    try:
        model_cfg = ModelConfig.from_dict(model_kw)
        train_cfg = TrainConfig.from_dict(train_kw)
    except TypeError as exc:
        raise ConfigError(f"unknown config field ({exc})") from exc
    if getattr(args, "variant", None):
        model_cfg = replace(model_cfg, variant=args.variant)
    if getattr(args, "seed", None) is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    return model_cfg, train_cfg


def _default_runs_dir() -> Path:
    return Path(os.environ.get("ATDKT_RUNS_DIR", "runs"))


# ---------------------------------------------------------------------------
# Commands


def cmd_prepare(args) -> int:
    interactions = load_interactions(args.input)
    stats = dataset_stats(interactions)
    expanded = expand_kc_level(interactions)
    kept = filter_and_truncate(expanded, min_len=args.min_len, max_len=args.max_len)
    dropped = len({s.student_id for s in expanded}) - len({s.student_id for s in kept})
    if len({s.student_id for s in kept}) < args.folds:
        raise ConfigError(
            f"only {len({s.student_id for s in kept})} students survive filtering; "
            f"cannot build {args.folds} folds")
    folds = kfold_split(kept, k=args.folds, seed=args.seed)
    out = Path(args.out)
    _claim_out_dir(out, args.force)
    stats.update({
        "students_dropped": dropped,
        "sequences": len(kept),
        "kept_steps": sum(len(s) for s in kept),
        "min_len": args.min_len,
        "max_len": args.max_len,
        "folds": args.folds,
        "seed": args.seed,
    })
    save_prepared(kept, out, fold_split=folds, stats=stats)
    _write_manifest(out, "prepare", stats, _sha256_file(Path(args.input)), args.seed)
    print(f"prepared {len(kept)} sequences from {stats['students']} students "
          f"({dropped} dropped below {args.min_len} steps)")
    print(f"avg KCs per question: {stats['avg_kcs_per_question']:.4f}")
    return 0


def cmd_train(args) -> int:
    sequences, folds = load_prepared(args.data)
    if folds is None:
        raise DataError(f"{args.data}: no folds.json; run prepare first")
    model_cfg, train_cfg = _resolve_configs(args, sequences)
    out = Path(args.out) if args.out else _default_runs_dir() / args.name
    _claim_out_dir(out, args.force)
    config_echo = {
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "data": str(args.data),
        "folds": list(range(folds.k)) if args.fold is None else [args.fold],
    }
    (out / "config.json").write_text(json.dumps(config_echo, indent=1, sort_keys=True))
    data_hash = _sha256_file(Path(args.data) / "sequences.csv")

    if args.fold is None:
        report = run_cv(sequences, folds, model_cfg, train_cfg, out_dir=out)
        print(report.format())
    else:
        assignment = folds.assignment(args.fold)
        result, params, records = train_fold(sequences, assignment,
                                             model_cfg, train_cfg)
        fold_dir = out / f"fold{args.fold}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(fold_dir / "checkpoint.npz", params)
        save_records(records, fold_dir / "records.csv")
        (fold_dir / "metrics.json").write_text(
            json.dumps(result.to_metrics_dict(), indent=1, sort_keys=True))
        print(f"fold {args.fold}: test AUC {result.test_auc:.4f} "
              f"ACC {result.test_accuracy:.4f} (best epoch {result.best_epoch})")
    _write_manifest(out, "train", config_echo, data_hash, train_cfg.seed)
    return 0


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run)
    config_path = run_dir / "config.json"
    if not config_path.exists():
        raise EvaluationError(f"{run_dir}: no config.json; not a run directory")
    run_cfg = json.loads(config_path.read_text())
    data_dir = Path(args.data) if args.data else Path(run_cfg["data"])
    sequences, folds = load_prepared(data_dir)
    if folds is None:
        raise DataError(f"{data_dir}: no folds.json")
    fold = args.fold if args.fold is not None else run_cfg["folds"][0]
    params = load_checkpoint(run_dir / f"fold{fold}" / "checkpoint.npz")
    assignment = folds.assignment(fold)
    students = {"train": assignment.train_students,
                "valid": assignment.valid_students,
                "test": assignment.test_students}[args.split]
    seqs = select_sequences(sequences, students)

    if args.mode == "onestep":
        records = one_step_eval(params, seqs)
        label = "onestep"
    else:
        if args.fraction is None:
            raise ConfigError("multistep mode needs --fraction")
        ms = MultiStepConfig(args.fraction, args.feedback)
        records = multistep_eval(params, seqs, ms)
        label = f"multistep_{args.fraction:g}_{args.feedback}"

    out = Path(args.out) if args.out else run_dir / f"eval_{label}_fold{fold}_{args.split}"
    _claim_out_dir(out, args.force)
    save_records(records, out / "records.csv")
    metrics = {
        "mode": args.mode,
        "split": args.split,
        "fold": fold,
        "records": len(records),
        "auc": auc(records),
        "accuracy": accuracy(records),
    }
    if args.mode == "multistep":
        metrics["observed_fraction"] = args.fraction
        metrics["feedback"] = args.feedback
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True))
    _write_manifest(out, f"evaluate {label}", metrics,
                    _sha256_file(data_dir / "sequences.csv"),
                    run_cfg.get("train", {}).get("seed", 0))
    print(f"{label} fold{fold} {args.split}: AUC {metrics['auc']:.4f} "
          f"ACC {metrics['accuracy']:.4f} over {len(records)} records")
    return 0


def cmd_synth(args) -> int:
    spec_kw = _load_json(args.spec) if args.spec else {}
    try:
        spec = SynthSpec(**spec_kw)
    except TypeError as exc:
        raise ConfigError(f"bad synth spec field ({exc})") from exc
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    result = generate(spec)
    out = Path(args.out)
    _claim_out_dir(out, args.force)
    save_dataset(result.interactions, out / "data.csv")
    save_truth(result, out / "truth.json")
    _write_manifest(out, "synth", asdict(spec), _sha256_file(out / "data.csv"),
                    spec.seed)
    stats = dataset_stats(result.interactions)
    print(f"generated {stats['interactions']} interactions for "
          f"{stats['students']} students "
          f"(avg KCs/question {stats['avg_kcs_per_question']:.4f})")
    return 0


def cmd_ablate(args) -> int:
    sequences, folds = load_prepared(args.data)
    if folds is None:
        raise DataError(f"{args.data}: no folds.json")
    model_cfg, train_cfg = _resolve_configs(args, sequences)
    out = Path(args.out)
    _claim_out_dir(out, args.force)
    config_echo = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
                   "data": str(args.data)}
    (out / "config.json").write_text(json.dumps(config_echo, indent=1, sort_keys=True))
    rows = ablation_run(sequences, folds, model_cfg, train_cfg,
                        path=out / "ablation.csv")
    _write_manifest(out, "ablate", config_echo,
                    _sha256_file(Path(args.data) / "sequences.csv"),
                    train_cfg.seed)
    for row in rows:
        print(f"{row['variant']:<12} AUC {row['auc']}  ACC {row['accuracy']}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="atdkt",
        description="Knowledge-tracing engine with question-tagging and "
                    "prior-knowledge auxiliary tasks.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="load, expand, filter, and split a dataset")
    p.add_argument("--input", required=True, help="interaction CSV")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--min-len", type=int, default=3)
    p.add_argument("--max-len", type=int, default=200)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one fold or a full cross-validation")
    p.add_argument("--data", required=True, help="prepared data directory")
    p.add_argument("--config", help="JSON file with model/train settings")
    p.add_argument("--fold", type=int, help="train a single fold (default: all)")
    p.add_argument("--variant", choices=("full", "no_qt", "no_ik", "no_qt_no_ik"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="run directory (default: $ATDKT_RUNS_DIR/<name>)")
    p.add_argument("--name", default="run")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a trained run")
    p.add_argument("--run", required=True, help="run directory from train")
    p.add_argument("--data", help="prepared data directory (default: from run config)")
    p.add_argument("--fold", type=int)
    p.add_argument("--mode", choices=("onestep", "multistep"), default="onestep")
    p.add_argument("--fraction", type=float, help="observed fraction for multistep")
    p.add_argument("--feedback", choices=("binarize", "probability"),
                   default="binarize")
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="generate a synthetic corpus with known truth")
    p.add_argument("--spec", help="JSON file of generator settings")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ablate", help="train all four variants and tabulate")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except AtdktError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
