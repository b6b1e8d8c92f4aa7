"""One-step and accumulative multi-step evaluation, plus data exports.

Both evaluation modes share one incremental per-sequence forward pass, so
the multi-step protocol at full observation is bit-identical to one-step
teacher forcing. Ground-truth responses are consumed only inside the
observed prefix; beyond it the model's own estimates are fed back.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import InteractionSequence, make_batch
from .errors import ConfigError, ShapeError
from .metrics import PredictionRecord
from .model import ModelParams, forward_batch, kt_head, lstm_step, question_encoder
from .tensor import Tensor

FRACTION_GRID = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
FEEDBACK_MODES = ("binarize", "probability")


@dataclass(frozen=True)
class MultiStepConfig:
    """Accumulative-evaluation settings.

    ``observed_fraction`` must sit on the protocol grid 0.2..0.9 (step
    0.1). ``feedback`` picks how the model's own estimate is re-encoded:
    ``binarize`` thresholds at 0.5 (default); ``probability`` mixes the
    two response embeddings by the predicted probability.
    """

    observed_fraction: float
    feedback: str = "binarize"

    def __post_init__(self):
        tenths = round(self.observed_fraction * 10)
        if not (2 <= tenths <= 9 and
                abs(self.observed_fraction * 10 - tenths) < 1e-9):
            raise ConfigError(
                f"observed_fraction {self.observed_fraction} not on the grid "
                f"{FRACTION_GRID}")
        if self.feedback not in FEEDBACK_MODES:
            raise ConfigError(f"feedback {self.feedback!r} not one of {FEEDBACK_MODES}")


def observed_steps(seq: InteractionSequence, fraction: float) -> int:
    """Observed-prefix length: ceil(fraction * T), extended forward so the
    boundary never splits one question's expanded KC block."""
    n = max(1, math.ceil(fraction * len(seq)))
    while n < len(seq) and seq.steps[n].interaction == seq.steps[n - 1].interaction:
        n += 1
    return n


def _predict_rows(params: ModelParams, seq: InteractionSequence, observed: int,
                  feedback: str = "binarize") -> tuple[np.ndarray, np.ndarray]:
    """Incremental forward over one sequence.

    Returns (rows, fed): rows[t] is the per-KC probability vector after
    consuming step t; fed[t] is the response value actually consumed at t
    (ground truth below ``observed``, the model's own estimate after).
    """
    cfg = params.config
    n = cfg.n_kcs
    steps = seq.steps
    t_len = len(steps)
    kc = np.array([s.kc_id for s in steps], dtype=np.int64)
    vanilla = cfg.variant == "no_qt_no_ik"
    with T.no_grad():
        if not vanilla:
            # Encoder inputs carry no response information, so the whole
            # z sequence is fixed up front regardless of feedback.
            q_idx = np.array([s.question_id for s in steps], dtype=np.int64)
            a = params["q_embed"].data[q_idx] + params["c_embed"].data[kc]
            if cfg.positional:
                if t_len > cfg.max_seq_len:
                    raise ShapeError(f"sequence has {t_len} steps but positions "
                                     f"cover only {cfg.max_seq_len}")
                a = a + params["pos_embed"].data[:t_len]
            z_rows = question_encoder(params, Tensor(a[None])).data[0]
            c_rows = params["c_embed"].data[kc]
        x_table = params["x_embed"].data
        h = Tensor(np.zeros((1, cfg.d)))
        cell = Tensor(np.zeros((1, cfg.d)))
        rows = np.empty((t_len, n))
        fed = np.empty(t_len)
        prev: np.ndarray | None = None
        for t in range(t_len):
            if t < observed:
                r = float(steps[t].response)
                fed[t] = r
                x_t = x_table[kc[t] + int(r) * n]
            else:
                p = float(prev[kc[t]])
                if feedback == "binarize":
                    r = 1.0 if p >= 0.5 else 0.0
                    fed[t] = r
                    x_t = x_table[kc[t] + int(r) * n]
                else:
                    fed[t] = p
                    x_t = (1.0 - p) * x_table[kc[t]] + p * x_table[kc[t] + n]
            m_t = x_t if vanilla else z_rows[t] + c_rows[t] + x_t
            h, cell = lstm_step(params, h, cell, Tensor(m_t[None]))
            prev = kt_head(params, h).data[0]
            rows[t] = prev
    return rows, fed


def one_step_eval(params: ModelParams,
                  sequences: Sequence[InteractionSequence]) -> list[PredictionRecord]:
    """Teacher-forced next-step records: one per step from position 2 on."""
    records = []
    for seq in sequences:
        rows, _ = _predict_rows(params, seq, len(seq))
        for t in range(1, len(seq)):
            kc = seq.steps[t].kc_id
            records.append(PredictionRecord(seq.student_id, t + 1, kc,
                                            float(rows[t - 1][kc]),
                                            seq.steps[t].response))
    return records


def multistep_eval(params: ModelParams, sequences: Sequence[InteractionSequence],
                   ms_cfg: MultiStepConfig) -> list[PredictionRecord]:
    """Accumulative prediction past an observed prefix.

    Records cover only the unobserved span; their targets are the true
    responses, which are never fed back into the model there.
    """
    records = []
    for seq in sequences:
        n_obs = observed_steps(seq, ms_cfg.observed_fraction)
        if n_obs >= len(seq):
            continue
        rows, _ = _predict_rows(params, seq, n_obs, ms_cfg.feedback)
        for t in range(n_obs, len(seq)):
            kc = seq.steps[t].kc_id
            records.append(PredictionRecord(seq.student_id, t + 1, kc,
                                            float(rows[t - 1][kc]),
                                            seq.steps[t].response))
    return records


def predict_records(params: ModelParams, sequences: Sequence[InteractionSequence],
                    batch_size: int = 64) -> list[PredictionRecord]:
    """Batched teacher-forced records; the trainer's fast evaluation path.

    Agrees with one_step_eval to float noise (same graph, batched ops);
    tests hold the gap under 1e-10.
    """
    cfg = params.config
    records = []
    for i in range(0, len(sequences), batch_size):
        chunk = sequences[i:i + batch_size]
        batch = make_batch(chunk, cfg.n_kcs, cfg.n_questions)
        with T.no_grad():
            out = forward_batch(params, batch)
        probs = out.kt_probs.data
        for b, seq in enumerate(chunk):
            for t in range(1, len(seq)):
                kc = seq.steps[t].kc_id
                records.append(PredictionRecord(seq.student_id, t + 1, kc,
                                                float(probs[b, t - 1, kc]),
                                                seq.steps[t].response))
    return records


# ---------------------------------------------------------------------------
# Data exports


def _write_csv(path: str | Path, fieldnames: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        w.writerows(rows)


def export_states(params: ModelParams, seq: InteractionSequence,
                  kc_subset: Sequence[int], path: str | Path | None = None) -> list[dict]:
    """Knowledge-state trajectory: per step, the predicted mastery of each
    KC in ``kc_subset`` after consuming that step."""
    for kc in kc_subset:
        if not 0 <= kc < params.config.n_kcs:
            raise ConfigError(f"kc {kc} outside [0, {params.config.n_kcs})")
    rows_probs, _ = _predict_rows(params, seq, len(seq))
    rows = []
    for t, step in enumerate(seq.steps):
        row = {"step": t + 1, "kc_id": step.kc_id, "response": step.response}
        for kc in kc_subset:
            row[f"p_kc{kc}"] = f"{rows_probs[t][kc]:.10f}"
        rows.append(row)
    if path is not None:
        _write_csv(path, list(rows[0].keys()), rows)
    return rows


def export_fused_embeddings(params: ModelParams,
                            sequences: Sequence[InteractionSequence],
                            top_k: int = 10, per_class: int = 200,
                            seed: int = 0,
                            path: str | Path | None = None) -> list[dict]:
    """Sample fused recurrence inputs m_t labeled by (kc, response).

    Takes the ``top_k`` KCs by response count, then up to ``per_class``
    steps per (kc, response) class, sampled without replacement under
    ``seed``. Classes with fewer candidates emit everything with a warning.
    """
    counts: dict[int, int] = {}
    candidates: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for si, seq in enumerate(sequences):
        for t, step in enumerate(seq.steps):
            counts[step.kc_id] = counts.get(step.kc_id, 0) + 1
            candidates.setdefault((step.kc_id, step.response), []).append((si, t))
    top = [kc for kc, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))][:top_k]

    rng = np.random.default_rng(seed)
    chosen: list[tuple[int, int, int, int]] = []  # (kc, response, seq_index, t)
    for kc in top:
        for resp in (0, 1):
            pool = candidates.get((kc, resp), [])
            if len(pool) < per_class:
                warnings.warn(f"kc {kc} response {resp}: only {len(pool)} samples "
                              f"available, wanted {per_class}")
                picked = pool
            else:
                idx = sorted(rng.choice(len(pool), size=per_class, replace=False))
                picked = [pool[i] for i in idx]
            chosen.extend((kc, resp, si, t) for si, t in picked)

    needed = sorted({si for _, _, si, _ in chosen})
    m_by_seq: dict[int, np.ndarray] = {}
    cfg = params.config
    for si in needed:
        batch = make_batch([sequences[si]], cfg.n_kcs, cfg.n_questions)
        with T.no_grad():
            m_by_seq[si] = forward_batch(params, batch).m.data[0]

    d = cfg.d
    rows = []
    for kc, resp, si, t in chosen:
        row = {"kc_id": kc, "response": resp,
               "student_id": sequences[si].student_id, "step": t + 1}
        vec = m_by_seq[si][t]
        for j in range(d):
            row[f"m_{j}"] = f"{vec[j]:.10f}"
        rows.append(row)
    if path is not None:
        fields = ["kc_id", "response", "student_id", "step"] + [f"m_{j}" for j in range(d)]
        _write_csv(path, fields, rows)
    return rows
