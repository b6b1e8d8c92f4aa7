"""Synthetic student simulator with a known Bayes-optimal reference.

Students carry per-KC mastery that rises with practice; responses are
mastery-driven Bernoulli draws with guess/slip noise. Question-to-KC
structure is fixed and known, so question-tagging signal is learnable by
construction, and the true per-step correctness probabilities give an
oracle AUC no model should beat beyond sampling noise.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import RawInteraction
from .errors import ConfigError, DataError
from .metrics import PredictionRecord, auc


@dataclass
class SynthSpec:
    """Generator knobs; defaults mirror the benchmark corpus shape."""

    students: int = 500
    n_kcs: int = 20
    n_questions: int = 200
    kc_mean: float = 1.36        # target mean KCs per question
    kc_max: int = 4
    ability_low: float = 0.25    # student ability ~ U(low, high)
    ability_high: float = 0.75
    mastery_sd: float = 0.50     # per-KC jitter around ability
    learn_rate: float = 0.08     # mastery gain per practice of a KC
    guess: float = 0.10
    slip: float = 0.10
    min_questions: int = 45
    max_questions: int = 75
    seed: int = 0

    def __post_init__(self):
        if min(self.students, self.n_kcs, self.n_questions) < 1:
            raise ConfigError("students, n_kcs, n_questions must be positive")
        if not 1 <= self.kc_max <= self.n_kcs:
            raise ConfigError(f"kc_max {self.kc_max} outside [1, n_kcs]")
        if not 1.0 <= self.kc_mean <= self.kc_max:
            raise ConfigError(f"kc_mean {self.kc_mean} outside [1, kc_max]")
        for name in ("guess", "slip", "learn_rate", "ability_low", "ability_high"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0,1], got {v}")
        if self.guess + self.slip >= 1.0:
            raise ConfigError("guess + slip must stay below 1 (informative responses)")
        if self.ability_low > self.ability_high:
            raise ConfigError("ability_low exceeds ability_high")
        if self.mastery_sd < 0:
            raise ConfigError("mastery_sd must be >= 0")
        if not 1 <= self.min_questions <= self.max_questions:
            raise ConfigError("need 1 <= min_questions <= max_questions")


@dataclass
class SynthResult:
    interactions: list[RawInteraction]
    # true P(correct) per expanded step, per student
    truth: dict[str, list[float]]
    question_kcs: list[tuple[int, ...]]
    spec: SynthSpec


def generate(spec: SynthSpec) -> SynthResult:
    """Simulate the population; deterministic given ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    # Question -> KC sets: 1 + Binomial(kc_max-1, p) KCs hits kc_mean on average.
    extra_p = 0.0 if spec.kc_max == 1 else (spec.kc_mean - 1.0) / (spec.kc_max - 1.0)
    question_kcs = []
    for _ in range(spec.n_questions):
        size = 1 + rng.binomial(spec.kc_max - 1, extra_p)
        kcs = tuple(sorted(rng.choice(spec.n_kcs, size=size, replace=False).tolist()))
        question_kcs.append(kcs)

    width = len(str(spec.students))
    interactions: list[RawInteraction] = []
    truth: dict[str, list[float]] = {}
    for si in range(spec.students):
        sid = f"s{si:0{width}d}"
        ability = rng.uniform(spec.ability_low, spec.ability_high)
        mastery = np.clip(ability + rng.normal(0.0, spec.mastery_sd, spec.n_kcs),
                          0.0, 1.0)
        n_q = int(rng.integers(spec.min_questions, spec.max_questions + 1))
        probs: list[float] = []
        for t in range(n_q):
            q = int(rng.integers(spec.n_questions))
            kcs = question_kcs[q]
            m = float(np.mean(mastery[list(kcs)]))
            p_true = m * (1.0 - spec.slip) + (1.0 - m) * spec.guess
            r = int(rng.random() < p_true)
            interactions.append(RawInteraction(sid, q, kcs, r, t + 1))
            probs.extend([p_true] * len(kcs))  # truth at the expanded level
            for k in kcs:
                mastery[k] += spec.learn_rate * (1.0 - mastery[k])
        truth[sid] = probs
    return SynthResult(interactions, truth, question_kcs, spec)


def oracle_auc_bound(truth: Mapping[str, Sequence[float]],
                     records: Sequence[PredictionRecord]) -> float:
    """AUC the Bayes-optimal predictor gets on these records' targets.

    Joins by (student_id, step); assumes sequences were not chunked, so a
    record's 1-based step indexes the student's expanded truth list.
    """
    scores = []
    targets = []
    for r in records:
        if r.student_id not in truth or not 1 <= r.step <= len(truth[r.student_id]):
            raise DataError(f"truth does not cover student {r.student_id} step {r.step}")
        scores.append(truth[r.student_id][r.step - 1])
        targets.append(r.response)
    return auc(np.asarray(scores), np.asarray(targets))


# ---------------------------------------------------------------------------
# Persistence


def save_dataset(interactions: Sequence[RawInteraction], path: str | Path) -> None:
    """Write the normalized interaction CSV."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["student_id", "question_id", "kc_ids", "response", "timestamp"])
        for r in interactions:
            w.writerow([r.student_id, r.question_id,
                        "_".join(str(k) for k in r.kc_ids), r.response, r.timestamp])


def save_truth(result: SynthResult, path: str | Path) -> None:
    payload = {
        "spec": asdict(result.spec),
        "question_kcs": [list(k) for k in result.question_kcs],
        "p_correct": result.truth,
    }
    Path(path).write_text(json.dumps(payload))


def load_truth(path: str | Path) -> dict[str, list[float]]:
    return json.loads(Path(path).read_text())["p_correct"]
