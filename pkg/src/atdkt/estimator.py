"""Estimator facade with the conventional fit/predict surface.

Wraps config handling, the training loop, and evaluation behind a single
object so the engine drops into scikit-learn-shaped pipelines: constructor
arguments are hyperparameters stored verbatim, ``fit`` returns self and
leaves trailing-underscore attributes, ``get_params``/``set_params``
support cloning and grid tooling. No scikit-learn import is required.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import InteractionSequence, infer_dims, select_sequences
from .errors import ConfigError, DataError, NotFittedError
from .evaluation import (MultiStepConfig, multistep_eval, one_step_eval,
                         predict_records)
from .metrics import PredictionRecord, accuracy, auc
from .model import ModelConfig, ModelParams, load_checkpoint, save_checkpoint
from .training import TrainConfig, _fit


class ATDKT:
    """Knowledge tracer: auxiliary-task LSTM over KC-expanded sequences.

    Parameters mirror ModelConfig/TrainConfig. ``n_kcs``/``n_questions``
    default to None and are inferred from the training data; pass them
    explicitly when later data may contain unseen ids.
    """

    def __init__(self, d: int = 64, heads: int = 4, enc_layers: int = 1,
                 variant: str = "full", delta: int = 10, beta_qt: float = 0.5,
                 beta_ik: float = 0.5, max_seq_len: int = 200,
                 positional: bool = True, scaled_attention: bool = True,
                 dropout: float = 0.0, lr: float = 1e-3, batch_size: int = 64,
                 max_epochs: int = 200, patience: int = 10,
                 valid_fraction: float = 0.1, seed: int = 0,
                 n_kcs: int | None = None, n_questions: int | None = None):
        self.d = d
        self.heads = heads
        self.enc_layers = enc_layers
        self.variant = variant
        self.delta = delta
        self.beta_qt = beta_qt
        self.beta_ik = beta_ik
        self.max_seq_len = max_seq_len
        self.positional = positional
        self.scaled_attention = scaled_attention
        self.dropout = dropout
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.valid_fraction = valid_fraction
        self.seed = seed
        self.n_kcs = n_kcs
        self.n_questions = n_questions

    _param_names = ("d", "heads", "enc_layers", "variant", "delta", "beta_qt",
                    "beta_ik", "max_seq_len", "positional", "scaled_attention",
                    "dropout", "lr", "batch_size", "max_epochs", "patience",
                    "valid_fraction", "seed", "n_kcs", "n_questions")

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names}

    def set_params(self, **params) -> "ATDKT":
        for name, value in params.items():
            if name not in self._param_names:
                raise ConfigError(f"unknown parameter {name!r}")
            setattr(self, name, value)
        return self

    # -- fitting -----------------------------------------------------------

    @staticmethod
    def _check_sequences(sequences) -> list[InteractionSequence]:
        seqs = list(sequences)
        if not seqs:
            raise DataError("no sequences given")
        for s in seqs:
            if not isinstance(s, InteractionSequence):
                raise DataError(f"expected InteractionSequence, got {type(s).__name__}")
            if len(s) < 2:
                raise DataError(f"student {s.student_id}: sequence too short ({len(s)})")
        return seqs

    def _split_validation(self, seqs: list[InteractionSequence]):
        """Student-level holdout when no explicit validation set is given."""
        students = sorted({s.student_id for s in seqs})
        n_valid = max(1, int(round(self.valid_fraction * len(students))))
        if n_valid >= len(students):
            raise DataError(f"cannot hold out {n_valid} of {len(students)} students")
        order = np.random.default_rng(self.seed).permutation(len(students))
        valid_ids = {students[i] for i in order[:n_valid]}
        train = [s for s in seqs if s.student_id not in valid_ids]
        valid = select_sequences(seqs, valid_ids)
        return train, valid

    def fit(self, sequences: Sequence[InteractionSequence],
            valid_sequences: Sequence[InteractionSequence] | None = None) -> "ATDKT":
        """Train with early stopping on validation AUC; returns self."""
        seqs = self._check_sequences(sequences)
        if valid_sequences is None:
            train_seqs, valid_seqs = self._split_validation(seqs)
        else:
            train_seqs, valid_seqs = seqs, self._check_sequences(valid_sequences)
        n_kcs, n_questions = infer_dims(train_seqs + list(valid_seqs))
        if self.n_kcs is not None:
            n_kcs = self.n_kcs
        if self.n_questions is not None:
            n_questions = self.n_questions
        self.config_ = ModelConfig(
            n_kcs=n_kcs, n_questions=n_questions, d=self.d, heads=self.heads,
            enc_layers=self.enc_layers, max_seq_len=self.max_seq_len,
            delta=self.delta, beta_qt=self.beta_qt, beta_ik=self.beta_ik,
            variant=self.variant, positional=self.positional,
            scaled_attention=self.scaled_attention, dropout=self.dropout)
        train_cfg = TrainConfig(lr=self.lr, batch_size=self.batch_size,
                                max_epochs=self.max_epochs,
                                patience=self.patience, seed=self.seed)
        params, best_epoch, epochs_run, curve = _fit(
            train_seqs, valid_seqs, self.config_, train_cfg)
        self.params_: ModelParams = params
        self.best_epoch_ = best_epoch
        self.epochs_run_ = epochs_run
        self.valid_auc_curve_ = curve
        self.n_kcs_ = n_kcs
        self.n_questions_ = n_questions
        return self

    def _require_fitted(self) -> ModelParams:
        if not hasattr(self, "params_"):
            raise NotFittedError("this ATDKT instance is not fitted yet; call fit()")
        return self.params_

    # -- inference ---------------------------------------------------------

    def predict_proba(self, sequences: Sequence[InteractionSequence],
                      exact: bool = False) -> list[PredictionRecord]:
        """Teacher-forced next-step records.

        ``exact`` uses the per-sequence incremental path (the one shared
        with multi-step evaluation); the default batched path is faster
        and equal to float noise.
        """
        params = self._require_fitted()
        seqs = self._check_sequences(sequences)
        if exact:
            return one_step_eval(params, seqs)
        return predict_records(params, seqs, self.batch_size)

    def predict(self, sequences: Sequence[InteractionSequence],
                threshold: float = 0.5) -> np.ndarray:
        """Binary next-step predictions, aligned with predict_proba order."""
        records = self.predict_proba(sequences)
        return np.array([int(r.p >= threshold) for r in records], dtype=np.int64)

    def predict_multistep(self, sequences: Sequence[InteractionSequence],
                          observed_fraction: float,
                          feedback: str = "binarize") -> list[PredictionRecord]:
        """Accumulative prediction past an observed prefix (protocol grid)."""
        params = self._require_fitted()
        cfg = MultiStepConfig(observed_fraction, feedback)
        return multistep_eval(params, self._check_sequences(sequences), cfg)

    def score(self, sequences: Sequence[InteractionSequence]) -> float:
        """Test AUC under teacher forcing."""
        return auc(self.predict_proba(sequences))

    def score_accuracy(self, sequences: Sequence[InteractionSequence]) -> float:
        return accuracy(self.predict_proba(sequences))

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(path, self._require_fitted())

    @classmethod
    def load(cls, path) -> "ATDKT":
        """Rebuild a fitted estimator from a checkpoint."""
        params = load_checkpoint(path)
        cfg = params.config
        est = cls(d=cfg.d, heads=cfg.heads, enc_layers=cfg.enc_layers,
                  variant=cfg.variant, delta=cfg.delta, beta_qt=cfg.beta_qt,
                  beta_ik=cfg.beta_ik, max_seq_len=cfg.max_seq_len,
                  scaled_attention=cfg.scaled_attention, dropout=cfg.dropout,
                  n_kcs=cfg.n_kcs, n_questions=cfg.n_questions)
        est.params_ = params
        est.config_ = cfg
        est.n_kcs_ = cfg.n_kcs
        est.n_questions_ = cfg.n_questions
        return est
