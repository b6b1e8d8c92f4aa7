"""Interaction log ingestion and preparation.

The on-disk format is a CSV with header
``student_id,question_id,kc_ids,response,timestamp`` where kc_ids joins
one or more integer knowledge-component ids with underscores. Questions
tagged with several KCs are expanded into one step per KC (question and
response repeated), which multiplies sequence length but lets the model
score each KC separately.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError

CSV_COLUMNS = ("student_id", "question_id", "kc_ids", "response", "timestamp")


@dataclass(frozen=True)
class RawInteraction:
    """One logged question attempt, before KC expansion."""

    student_id: str
    question_id: int
    kc_ids: tuple[int, ...]  # sorted, nonempty
    response: int            # 0 or 1
    timestamp: int


@dataclass(frozen=True)
class Step:
    """One KC-level step after expansion.

    ``interaction`` is the ordinal of the originating attempt within the
    student's log, so consecutive steps from one multi-KC question can be
    told apart from two back-to-back attempts at the same question.
    """

    question_id: int
    kc_id: int
    kc_set: tuple[int, ...]
    response: int
    interaction: int


@dataclass
class InteractionSequence:
    """A student's expanded step sequence (or one chunk of it)."""

    student_id: str
    steps: list[Step]
    chunk: int = 0

    def __len__(self) -> int:
        return len(self.steps)


# ---------------------------------------------------------------------------
# Loading


def _parse_row(row: Mapping[str, str], line: int) -> RawInteraction:
    try:
        kcs = tuple(sorted(int(k) for k in row["kc_ids"].split("_")))
        out = RawInteraction(
            student_id=row["student_id"],
            question_id=int(row["question_id"]),
            kc_ids=kcs,
            response=int(row["response"]),
            timestamp=int(row["timestamp"]),
        )
    except (KeyError, ValueError, AttributeError) as exc:
        raise DataError(f"line {line}: malformed row ({exc})") from exc
    if not out.student_id:
        raise DataError(f"line {line}: empty student_id")
    if not kcs or any(k < 0 for k in kcs):
        raise DataError(f"line {line}: kc_ids must be nonempty non-negative, got {row['kc_ids']!r}")
    if out.question_id < 0:
        raise DataError(f"line {line}: negative question_id")
    if out.response not in (0, 1):
        raise DataError(f"line {line}: response must be 0 or 1, got {row['response']!r}")
    return out


def load_interactions(path: str | Path) -> list[RawInteraction]:
    """Read the interaction CSV; rows come back grouped by student and
    time-sorted within each student.

    Raises DataError on schema mismatch, malformed rows, or duplicate
    timestamps within a student (ordering would be ambiguous).
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []  # a file with no rows at all is just an empty dataset
        if tuple(reader.fieldnames) != CSV_COLUMNS:
            raise DataError(
                f"{path}: expected columns {','.join(CSV_COLUMNS)}, "
                f"got {','.join(reader.fieldnames)}"
            )
        rows = [_parse_row(row, i) for i, row in enumerate(reader, start=2)]

    by_student: dict[str, list[RawInteraction]] = {}
    for r in rows:
        by_student.setdefault(r.student_id, []).append(r)
    out: list[RawInteraction] = []
    for sid, items in by_student.items():
        items.sort(key=lambda r: r.timestamp)
        for a, b in zip(items, items[1:]):
            if a.timestamp == b.timestamp:
                raise DataError(f"student {sid}: duplicate timestamp {a.timestamp}")
        out.extend(items)
    return out


def expand_kc_level(interactions: Sequence[RawInteraction]) -> list[InteractionSequence]:
    """Expand multi-KC attempts into per-KC steps, one sequence per student.

    A question tagged with n KCs becomes n consecutive steps sharing its
    question id and response. Concatenating a student's steps in order and
    collapsing equal ``interaction`` ordinals recovers the original log.
    """
    by_student: dict[str, list[RawInteraction]] = {}
    for r in interactions:
        by_student.setdefault(r.student_id, []).append(r)
    sequences = []
    for sid, items in by_student.items():
        steps = []
        for i, r in enumerate(items):
            # Normalize here rather than trusting the record: steps for one
            # attempt must come out in ascending KC order.
            kcs = tuple(sorted(set(r.kc_ids)))
            steps.extend(Step(r.question_id, kc, kcs, r.response, i) for kc in kcs)
        sequences.append(InteractionSequence(sid, steps))
    return sequences


def filter_and_truncate(sequences: Iterable[InteractionSequence],
                        min_len: int = 3, max_len: int = 200) -> list[InteractionSequence]:
    """Drop short sequences and chunk long ones.

    Sequences shorter than ``min_len`` (after expansion) are removed.
    Longer ones are cut into consecutive chunks of at most ``max_len``
    steps, preserving order; a trailing chunk shorter than ``min_len`` is
    dropped by the same rule. A 450-step sequence becomes 200 + 200 + 50.
    """
    if min_len < 1 or max_len < min_len:
        raise ConfigError(f"bad length bounds min_len={min_len}, max_len={max_len}")
    out = []
    for seq in sequences:
        if len(seq) < min_len:
            continue
        for ci, start in enumerate(range(0, len(seq), max_len)):
            part = seq.steps[start:start + max_len]
            if len(part) >= min_len:
                out.append(InteractionSequence(seq.student_id, part, chunk=ci))
    return out


def dataset_stats(interactions: Sequence[RawInteraction]) -> dict:
    """Corpus shape summary; avg_kcs_per_question averages over unique
    questions (each question's tag-set size counted once)."""
    students = {r.student_id for r in interactions}
    kc_sets: dict[int, tuple[int, ...]] = {}
    kcs = set()
    expanded = 0
    for r in interactions:
        kc_sets[r.question_id] = r.kc_ids
        kcs.update(r.kc_ids)
        expanded += len(r.kc_ids)
    avg = (sum(len(s) for s in kc_sets.values()) / len(kc_sets)) if kc_sets else 0.0
    return {
        "students": len(students),
        "interactions": len(interactions),
        "expanded_steps": expanded,
        "questions": len(kc_sets),
        "kcs": len(kcs),
        "avg_kcs_per_question": avg,
    }


# ---------------------------------------------------------------------------
# Cross-validation folds


@dataclass(frozen=True)
class FoldAssignment:
    """Train/valid/test student ids for one fold."""

    fold: int
    train_students: tuple[str, ...]
    valid_students: tuple[str, ...]
    test_students: tuple[str, ...]


@dataclass
class FoldSplit:
    """A k-way partition of students plus the rotation rule over it.

    Fold i tests on group i and validates on group (i + 1) mod k; the
    remaining groups train. Groups are disjoint, so no student appears in
    two roles within a fold or in two test groups across folds.
    """

    groups: list[list[str]]
    seed: int

    @property
    def k(self) -> int:
        return len(self.groups)

    def assignment(self, fold: int) -> FoldAssignment:
        if not 0 <= fold < self.k:
            raise ConfigError(f"fold {fold} outside [0, {self.k})")
        test = tuple(self.groups[fold])
        valid = tuple(self.groups[(fold + 1) % self.k])
        train = tuple(
            s for i, g in enumerate(self.groups)
            if i not in (fold, (fold + 1) % self.k) for s in g
        )
        return FoldAssignment(fold, train, valid, test)

    def save(self, path: str | Path) -> None:
        payload = {str(i): g for i, g in enumerate(self.groups)}
        Path(path).write_text(json.dumps(payload, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "FoldSplit":
        raw = json.loads(Path(path).read_text())
        groups = [raw[str(i)] for i in range(len(raw))]
        return cls(groups=groups, seed=-1)


def kfold_split(sequences: Sequence[InteractionSequence], k: int = 5,
                seed: int = 0) -> FoldSplit:
    """Partition students (not sequences) into k shuffled groups.

    All chunks of a student land in the same group. Fails if there are
    fewer students than folds.
    """
    students = sorted({s.student_id for s in sequences})
    if len(students) < k:
        raise ConfigError(f"{len(students)} students cannot fill {k} folds")
    if k < 3:
        # test and valid each take one whole group; train needs the rest
        raise ConfigError(f"need at least 3 folds, got {k}")
    order = np.random.default_rng(seed).permutation(len(students))
    shuffled = [students[i] for i in order]
    groups = [list(g) for g in np.array_split(shuffled, k)]
    return FoldSplit(groups=groups, seed=seed)


def select_sequences(sequences: Sequence[InteractionSequence],
                     students: Iterable[str]) -> list[InteractionSequence]:
    wanted = set(students)
    return [s for s in sequences if s.student_id in wanted]


# ---------------------------------------------------------------------------
# Supervision targets


def compute_scoring_rates(seq: InteractionSequence) -> np.ndarray:
    """Running mean of correct responses up to and including each step."""
    r = np.array([s.response for s in seq.steps], dtype=np.float64)
    return np.cumsum(r) / np.arange(1, len(r) + 1)


def build_qt_targets(seq: InteractionSequence, n_kcs: int) -> np.ndarray:
    """[T, n_kcs] multi-hot rows marking each step's full KC set."""
    out = np.zeros((len(seq), n_kcs), dtype=np.float64)
    for t, step in enumerate(seq.steps):
        for kc in step.kc_set:
            if kc >= n_kcs:
                raise DataError(f"kc id {kc} outside model range {n_kcs}")
            out[t, kc] = 1.0
    return out


# ---------------------------------------------------------------------------
# Batching


@dataclass
class Batch:
    """End-padded arrays for a set of sequences.

    All [B, T] arrays are padded with zeros past each sequence's length;
    ``mask`` marks real steps and ``next_mask`` marks steps that have a
    successor (the positions where next-step prediction is scored).
    """

    student_ids: list[str]
    lengths: np.ndarray        # [B]
    question_idx: np.ndarray   # [B, T]
    kc_idx: np.ndarray         # [B, T]
    inter_idx: np.ndarray      # [B, T] kc + response * n_kcs
    responses: np.ndarray      # [B, T] float
    qt_targets: np.ndarray     # [B, T, n_kcs]
    ik_targets: np.ndarray     # [B, T] running scoring rate
    mask: np.ndarray           # [B, T] bool
    next_kc: np.ndarray        # [B, T]
    next_resp: np.ndarray      # [B, T]
    next_mask: np.ndarray      # [B, T] bool

    @property
    def size(self) -> int:
        return len(self.student_ids)

    @property
    def max_len(self) -> int:
        return int(self.lengths.max())


def make_batch(sequences: Sequence[InteractionSequence], n_kcs: int,
               n_questions: int) -> Batch:
    """Assemble padded arrays; validates every id against the model ranges."""
    if not sequences:
        raise DataError("make_batch: empty sequence list")
    b = len(sequences)
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    t_max = int(lengths.max())
    q = np.zeros((b, t_max), dtype=np.int64)
    kc = np.zeros((b, t_max), dtype=np.int64)
    resp = np.zeros((b, t_max), dtype=np.float64)
    qt = np.zeros((b, t_max, n_kcs), dtype=np.float64)
    ik = np.zeros((b, t_max), dtype=np.float64)
    mask = np.zeros((b, t_max), dtype=bool)
    for i, seq in enumerate(sequences):
        n = len(seq)
        for t, step in enumerate(seq.steps):
            if step.kc_id >= n_kcs:
                raise DataError(f"kc id {step.kc_id} outside model range {n_kcs}")
            if step.question_id >= n_questions:
                raise DataError(
                    f"question id {step.question_id} outside model range {n_questions}")
        q[i, :n] = [s.question_id for s in seq.steps]
        kc[i, :n] = [s.kc_id for s in seq.steps]
        resp[i, :n] = [s.response for s in seq.steps]
        qt[i, :n] = build_qt_targets(seq, n_kcs)
        ik[i, :n] = compute_scoring_rates(seq)
        mask[i, :n] = True
    inter = kc + resp.astype(np.int64) * n_kcs
    next_kc = np.zeros_like(kc)
    next_kc[:, :-1] = kc[:, 1:]
    next_resp = np.zeros_like(resp)
    next_resp[:, :-1] = resp[:, 1:]
    next_mask = np.zeros_like(mask)
    next_mask[:, :-1] = mask[:, 1:]
    return Batch(
        student_ids=[s.student_id for s in sequences],
        lengths=lengths, question_idx=q, kc_idx=kc, inter_idx=inter,
        responses=resp, qt_targets=qt, ik_targets=ik, mask=mask,
        next_kc=next_kc, next_resp=next_resp, next_mask=next_mask,
    )


def iter_batches(sequences: Sequence[InteractionSequence], batch_size: int,
                 n_kcs: int, n_questions: int,
                 rng: np.random.Generator | None = None) -> Iterable[Batch]:
    """Yield batches; shuffles sequence order when an rng is given."""
    order = list(range(len(sequences)))
    if rng is not None:
        order = list(rng.permutation(len(sequences)))
    for i in range(0, len(order), batch_size):
        chunk = [sequences[j] for j in order[i:i + batch_size]]
        yield make_batch(chunk, n_kcs, n_questions)


def infer_dims(sequences: Sequence[InteractionSequence]) -> tuple[int, int]:
    """Smallest (n_kcs, n_questions) covering every id in the data."""
    n_kcs = 0
    n_questions = 0
    for seq in sequences:
        for step in seq.steps:
            n_kcs = max(n_kcs, max(step.kc_set) + 1)
            n_questions = max(n_questions, step.question_id + 1)
    if n_kcs == 0:
        raise DataError("infer_dims: no steps present")
    return n_kcs, n_questions


# ---------------------------------------------------------------------------
# Prepared-dataset directory format

PREPARED_COLUMNS = ("student_id", "chunk", "interaction", "question_id",
                    "kc_id", "kc_set", "response")


def save_prepared(sequences: Sequence[InteractionSequence], out_dir: str | Path,
                  fold_split: FoldSplit | None = None,
                  stats: Mapping | None = None) -> None:
    """Write expanded sequences (and optional folds/stats) to a directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sequences.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PREPARED_COLUMNS)
        for seq in sequences:
            for s in seq.steps:
                w.writerow([seq.student_id, seq.chunk, s.interaction,
                            s.question_id, s.kc_id,
                            "_".join(str(k) for k in s.kc_set), s.response])
    if fold_split is not None:
        fold_split.save(out / "folds.json")
    if stats is not None:
        (out / "stats.json").write_text(json.dumps(stats, indent=1))


def load_prepared(data_dir: str | Path) -> tuple[list[InteractionSequence], FoldSplit | None]:
    """Read a directory written by save_prepared."""
    data_dir = Path(data_dir)
    seq_path = data_dir / "sequences.csv"
    if not seq_path.exists():
        raise DataError(f"{data_dir}: no sequences.csv")
    sequences: dict[tuple[str, int], list[Step]] = {}
    with open(seq_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != PREPARED_COLUMNS:
            raise DataError(f"{seq_path}: unexpected columns {reader.fieldnames}")
        for i, row in enumerate(reader, start=2):
            try:
                key = (row["student_id"], int(row["chunk"]))
                step = Step(
                    question_id=int(row["question_id"]),
                    kc_id=int(row["kc_id"]),
                    kc_set=tuple(sorted(int(k) for k in row["kc_set"].split("_"))),
                    response=int(row["response"]),
                    interaction=int(row["interaction"]),
                )
            except (KeyError, ValueError) as exc:
                raise DataError(f"{seq_path}:{i}: malformed row ({exc})") from exc
            sequences.setdefault(key, []).append(step)
    out = [InteractionSequence(sid, steps, chunk=ci)
           for (sid, ci), steps in sequences.items()]
    folds = None
    if (data_dir / "folds.json").exists():
        folds = FoldSplit.load(data_dir / "folds.json")
    return out, folds
