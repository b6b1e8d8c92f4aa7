"""Binary-classification metrics over next-step prediction records."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import MetricError


@dataclass(frozen=True)
class PredictionRecord:
    """One scored next-step prediction.

    ``step`` is the 1-based position of the predicted step within its
    sequence; ``p`` is the predicted probability that ``response`` is 1.
    """

    student_id: str
    step: int
    kc_id: int
    p: float
    response: int


def _scores_targets(records, targets):
    if targets is None:
        scores = np.array([r.p for r in records], dtype=np.float64)
        y = np.array([r.response for r in records], dtype=np.int64)
    else:
        scores = np.asarray(records, dtype=np.float64)
        y = np.asarray(targets, dtype=np.int64)
    if scores.shape != y.shape or scores.ndim != 1:
        raise MetricError(f"scores {scores.shape} and targets do not align")
    return scores, y


def auc(records: Sequence[PredictionRecord] | np.ndarray, targets=None) -> float:
    """Area under the ROC curve via tie-averaged ranks.

    Equivalent to the probability that a random positive outscores a
    random negative, ties counting one half. Undefined (MetricError) when
    either class is absent.
    """
    scores, y = _scores_targets(records, targets)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError(f"AUC undefined: {n_pos} positives, {n_neg} negatives")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    ranks[order] = np.arange(1, len(scores) + 1)
    # Average ranks within tied groups so equal scores split the credit.
    sorted_scores = scores[order]
    boundaries = np.flatnonzero(np.diff(sorted_scores) != 0) + 1
    starts = np.concatenate(([0], boundaries))
    stops = np.concatenate((boundaries, [len(scores)]))
    for a, b in zip(starts, stops):
        if b - a > 1:
            ranks[order[a:b]] = (a + 1 + b) / 2.0
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def accuracy(records: Sequence[PredictionRecord] | np.ndarray, targets=None,
             threshold: float = 0.5) -> float:
    """Fraction of records whose thresholded prediction matches the response."""
    scores, y = _scores_targets(records, targets)
    if len(y) == 0:
        raise MetricError("accuracy undefined on empty input")
    return float(((scores >= threshold).astype(np.int64) == y).mean())


RECORD_COLUMNS = ("student_id", "step", "kc_id", "p", "response")


def save_records(records: Sequence[PredictionRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow([r.student_id, r.step, r.kc_id, f"{r.p:.10f}", r.response])


def load_records(path: str | Path) -> list[PredictionRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [PredictionRecord(row["student_id"], int(row["step"]),
                                 int(row["kc_id"]), float(row["p"]),
                                 int(row["response"]))
                for row in reader]
