"""Training protocol: per-fold fitting with early stopping, k-fold
cross-validation, seeded random hyperparameter search, and the four-way
ablation runner."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import (FoldSplit, InteractionSequence, iter_batches, kfold_split,
                   select_sequences)
from .errors import ConfigError, TrainingError
from .evaluation import predict_records
from .metrics import PredictionRecord, accuracy, auc
from .model import ModelConfig, ModelParams, forward_batch, init_params
from .optim import Adam

# Search space for every tunable the protocol sweeps.
HYPERPARAM_GRID: dict[str, tuple] = {
    "d": (64, 256),
    "enc_layers": (1, 2, 4),
    "heads": (4, 8),
    "lr": (1e-3, 1e-4, 1e-5),
    "delta": (0, 10, 30, 50, 70, 100, 120, 150),
    "beta_qt": (0.01, 0.1, 0.3, 0.5, 0.7, 1.0),
    "beta_ik": (0.01, 0.1, 0.3, 0.5, 0.7, 1.0),
}


@dataclass
class TrainConfig:
    """Optimization settings; the grid rides along for search and manifests."""

    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    grid: Mapping[str, tuple] = field(default_factory=lambda: dict(HYPERPARAM_GRID))

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 1 <= self.patience < self.max_epochs:
            raise ConfigError(
                f"patience must be in [1, max_epochs), got {self.patience}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = {k: list(v) for k, v in self.grid.items()}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        if "grid" in d:
            d["grid"] = {k: tuple(v) for k, v in d["grid"].items()}
        return cls(**d)


def _student_hash(sequences: Sequence[InteractionSequence]) -> str:
    ids = sorted({s.student_id for s in sequences})
    return hashlib.sha256("\n".join(ids).encode()).hexdigest()[:16]


@dataclass
class FoldResult:
    """Outcome of one fold: curve, best checkpoint's test metrics, provenance.

    ``split_hashes`` records which student sets each phase read, so leakage
    is auditable: fitting saw train+valid only, testing saw test only.
    """

    fold: int
    best_epoch: int
    epochs_run: int
    valid_auc_curve: list[float]
    valid_auc: float
    test_auc: float
    test_accuracy: float
    n_test_records: int
    hyperparams: dict
    split_hashes: dict[str, str]
    wall_time: float

    def to_metrics_dict(self) -> dict:
        """Deterministic fields only (wall time varies between runs)."""
        d = asdict(self)
        d.pop("wall_time")
        return d


def _fit(train_seqs: Sequence[InteractionSequence],
         valid_seqs: Sequence[InteractionSequence],
         model_cfg: ModelConfig, train_cfg: TrainConfig
         ) -> tuple[ModelParams, int, int, list[float]]:
    """Core loop: returns (params at best epoch, best_epoch, epochs_run, curve).

    Stops when ``patience`` consecutive epochs fail to improve the best
    validation AUC, or at ``max_epochs``.
    """
    rng = np.random.default_rng(train_cfg.seed)
    params = init_params(model_cfg, rng)
    opt = Adam(params.named(), lr=train_cfg.lr)
    drop_rng = rng if model_cfg.dropout else None
    best_auc = -math.inf
    best_epoch = 0
    best_snap = params.snapshot()
    curve: list[float] = []
    stall = 0
    epoch = 0
    for epoch in range(1, train_cfg.max_epochs + 1):
        for batch in iter_batches(train_seqs, train_cfg.batch_size,
                                  model_cfg.n_kcs, model_cfg.n_questions, rng):
            out = forward_batch(params, batch, rng=drop_rng)
            if not np.isfinite(out.total.data):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} (fold training aborted)")
            T.backward(out.total)
            opt.step()
            opt.zero_grad()
        epoch_auc = auc(predict_records(params, valid_seqs, train_cfg.batch_size))
        curve.append(epoch_auc)
        if epoch_auc > best_auc:
            best_auc = epoch_auc
            best_epoch = epoch
            best_snap = params.snapshot()
            stall = 0
        else:
            stall += 1
            if stall >= train_cfg.patience:
                break
    params.restore(best_snap)
    return params, best_epoch, epoch, curve


def train_fold(sequences: Sequence[InteractionSequence], assignment,
               model_cfg: ModelConfig, train_cfg: TrainConfig
               ) -> tuple[FoldResult, ModelParams, list[PredictionRecord]]:
    """Train one fold and score its test split at the best checkpoint."""
    t0 = time.perf_counter()
    train_seqs = select_sequences(sequences, assignment.train_students)
    valid_seqs = select_sequences(sequences, assignment.valid_students)
    test_seqs = select_sequences(sequences, assignment.test_students)
    if not train_seqs or not valid_seqs or not test_seqs:
        raise ConfigError(f"fold {assignment.fold}: a split is empty")
    params, best_epoch, epochs_run, curve = _fit(train_seqs, valid_seqs,
                                                 model_cfg, train_cfg)
    records = predict_records(params, test_seqs, train_cfg.batch_size)
    result = FoldResult(
        fold=assignment.fold,
        best_epoch=best_epoch,
        epochs_run=epochs_run,
        valid_auc_curve=curve,
        valid_auc=max(curve),
        test_auc=auc(records),
        test_accuracy=accuracy(records),
        n_test_records=len(records),
        hyperparams={"model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
        split_hashes={"train": _student_hash(train_seqs),
                      "valid": _student_hash(valid_seqs),
                      "test": _student_hash(test_seqs)},
        wall_time=time.perf_counter() - t0,
    )
    return result, params, records


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())  # population std, ddof=0


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.4f}±{std:.4f}"


@dataclass
class CVReport:
    """Aggregated cross-validation metrics (mean +- population std)."""

    fold_results: list[FoldResult]
    auc_mean: float
    auc_std: float
    acc_mean: float
    acc_std: float
    incomplete: bool = False
    errors: list[str] = field(default_factory=list)

    def format(self) -> str:
        return (f"AUC {format_mean_std(self.auc_mean, self.auc_std)}  "
                f"ACC {format_mean_std(self.acc_mean, self.acc_std)}")

    def to_metrics_dict(self) -> dict:
        return {
            "folds": [fr.to_metrics_dict() for fr in self.fold_results],
            "auc_mean": self.auc_mean,
            "auc_std": self.auc_std,
            "acc_mean": self.acc_mean,
            "acc_std": self.acc_std,
            "auc": format_mean_std(self.auc_mean, self.auc_std),
            "accuracy": format_mean_std(self.acc_mean, self.acc_std),
            "incomplete": self.incomplete,
            "errors": self.errors,
        }


def run_cv(sequences: Sequence[InteractionSequence], folds: FoldSplit,
           model_cfg: ModelConfig, train_cfg: TrainConfig,
           out_dir: str | Path | None = None) -> CVReport:
    """Train every fold; aggregate test metrics over the folds that finished.

    A fold aborted by a training error is recorded and skipped, and the
    report is flagged incomplete rather than discarded.
    """
    from .model import save_checkpoint  # local to keep import graph flat
    from .metrics import save_records

    results: list[FoldResult] = []
    errors: list[str] = []
    for i in range(folds.k):
        assignment = folds.assignment(i)
        try:
            result, params, records = train_fold(sequences, assignment,
                                                 model_cfg, train_cfg)
        except TrainingError as exc:
            errors.append(f"fold {i}: {exc}")
            continue
        results.append(result)
        if out_dir is not None:
            fold_dir = Path(out_dir) / f"fold{i}"
            fold_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(fold_dir / "checkpoint.npz", params)
            save_records(records, fold_dir / "records.csv")
            (fold_dir / "metrics.json").write_text(
                json.dumps(result.to_metrics_dict(), indent=1, sort_keys=True))
    if not results:
        raise TrainingError("all folds aborted: " + "; ".join(errors))
    auc_mean, auc_std = _mean_std([r.test_auc for r in results])
    acc_mean, acc_std = _mean_std([r.test_accuracy for r in results])
    report = CVReport(results, auc_mean, auc_std, acc_mean, acc_std,
                      incomplete=bool(errors), errors=errors)
    if out_dir is not None:
        (Path(out_dir) / "metrics.json").write_text(
            json.dumps(report.to_metrics_dict(), indent=1, sort_keys=True))
    return report


# ---------------------------------------------------------------------------
# Hyperparameter search


def grid_size(grid: Mapping[str, Sequence]) -> int:
    size = 1
    for values in grid.values():
        size *= len(values)
    return size


def _combo_at(grid: Mapping[str, Sequence], index: int) -> dict:
    """Mixed-radix decode of a flat index into one grid point."""
    combo = {}
    for key in sorted(grid):
        values = grid[key]
        combo[key] = values[index % len(values)]
        index //= len(values)
    return combo


def hyperparam_search(sequences: Sequence[InteractionSequence], folds: FoldSplit,
                      base_model: ModelConfig, base_train: TrainConfig,
                      budget: int = 8, seed: int = 0,
                      trials_path: str | Path | None = None) -> dict[int, dict]:
    """Seeded random search: sample ``budget`` distinct grid points, train
    each on every fold's train/valid split, keep the per-fold argmax.

    Every trial is appended to ``trials_path`` (JSON lines) so the chosen
    point is auditable against the log.
    """
    if budget < 1:
        raise ConfigError(f"budget must be >= 1, got {budget}")
    grid = base_train.grid
    total = grid_size(grid)
    if budget > total:
        warnings.warn(f"budget {budget} exceeds grid size {total}; clipping")
        budget = total
    rng = np.random.default_rng(seed)
    indices = sorted(int(i) for i in rng.choice(total, size=budget, replace=False))
    combos = [_combo_at(grid, i) for i in indices]

    log_fh = open(trials_path, "w") if trials_path is not None else None
    best: dict[int, dict] = {}
    try:
        for fold in range(folds.k):
            assignment = folds.assignment(fold)
            train_seqs = select_sequences(sequences, assignment.train_students)
            valid_seqs = select_sequences(sequences, assignment.valid_students)
            for combo in combos:
                model_cfg = replace(base_model,
                                    **{k: v for k, v in combo.items()
                                       if k in ("d", "enc_layers", "heads",
                                                "delta", "beta_qt", "beta_ik")})
                train_cfg = replace(base_train, lr=combo["lr"])
                _, best_epoch, _, curve = _fit(train_seqs, valid_seqs,
                                               model_cfg, train_cfg)
                trial = {"fold": fold, "params": combo,
                         "valid_auc": max(curve), "best_epoch": best_epoch}
                if log_fh is not None:
                    log_fh.write(json.dumps(trial, sort_keys=True) + "\n")
                if fold not in best or trial["valid_auc"] > best[fold]["valid_auc"]:
                    best[fold] = trial
    finally:
        if log_fh is not None:
            log_fh.close()
    return best


# ---------------------------------------------------------------------------
# Ablation

ABLATION_ORDER = ("full", "no_ik", "no_qt", "no_qt_no_ik")


def ablation_run(sequences: Sequence[InteractionSequence], folds: FoldSplit,
                 base_model: ModelConfig, train_cfg: TrainConfig,
                 path: str | Path | None = None) -> list[dict]:
    """Run all four variants under identical folds and seeds.

    Returns (and optionally writes) one row per variant with mean/std test
    AUC and accuracy over the folds.
    """
    rows = []
    for variant in ABLATION_ORDER:
        model_cfg = replace(base_model, variant=variant)
        report = run_cv(sequences, folds, model_cfg, train_cfg)
        rows.append({
            "variant": variant,
            "auc_mean": f"{report.auc_mean:.6f}",
            "auc_std": f"{report.auc_std:.6f}",
            "acc_mean": f"{report.acc_mean:.6f}",
            "acc_std": f"{report.acc_std:.6f}",
            "auc": format_mean_std(report.auc_mean, report.auc_std),
            "accuracy": format_mean_std(report.acc_mean, report.acc_std),
        })
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            w.writeheader()
            w.writerows(rows)
    return rows


__all__ = [
    "HYPERPARAM_GRID", "TrainConfig", "FoldResult", "CVReport", "train_fold",
    "run_cv", "hyperparam_search", "ablation_run", "grid_size",
    "format_mean_std", "ABLATION_ORDER", "kfold_split",
]
