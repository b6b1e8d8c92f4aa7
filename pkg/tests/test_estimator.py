"""Estimator facade: parameter handling, fit/predict surface, persistence."""

import numpy as np
import pytest

from atdkt import ATDKT, ConfigError, DataError, NotFittedError

from test_training import rule_sequences


def small_est(**kw):
    base = dict(d=8, heads=2, max_seq_len=16, delta=0, lr=0.01, batch_size=8,
                max_epochs=4, patience=2, seed=0)
    base.update(kw)
    return ATDKT(**base)


def test_get_set_params_roundtrip():
    est = ATDKT()
    params = est.get_params()
    assert params["d"] == 64
    assert params["variant"] == "full"
    assert params["delta"] == 10
    est.set_params(d=32, delta=5)
    assert est.get_params()["d"] == 32
    assert est.get_params()["delta"] == 5
    clone = ATDKT(**est.get_params())
    assert clone.get_params() == est.get_params()


def test_set_params_rejects_unknown():
    with pytest.raises(ConfigError, match="unknown parameter"):
        ATDKT().set_params(learning_rate=0.1)


def test_unfitted_estimator_raises():
    est = ATDKT()
    seqs = rule_sequences(4)
    with pytest.raises(NotFittedError, match="fit"):
        est.predict_proba(seqs)
    with pytest.raises(NotFittedError):
        est.save("/tmp/nope.npz")


def test_fit_returns_self_and_sets_attrs():
    seqs = rule_sequences(12)
    est = small_est()
    assert est.fit(seqs) is est
    assert est.n_kcs_ == 4
    assert est.n_questions_ == 4
    assert est.best_epoch_ >= 1
    assert est.epochs_run_ >= est.best_epoch_
    assert len(est.valid_auc_curve_) == est.epochs_run_
    assert est.config_.variant == "full"


def test_fit_rejects_bad_input():
    est = small_est()
    with pytest.raises(DataError):
        est.fit([])
    with pytest.raises(DataError, match="InteractionSequence"):
        est.fit(["not a sequence"])


def test_fit_deterministic_in_seed():
    seqs = rule_sequences(12)
    a = small_est().fit(seqs)
    b = small_est().fit(seqs)
    assert a.valid_auc_curve_ == b.valid_auc_curve_
    for k in a.params_.tensors:
        assert np.array_equal(a.params_[k].data, b.params_[k].data)


def test_explicit_validation_set():
    seqs = rule_sequences(12)
    est = small_est().fit(seqs[:9], valid_sequences=seqs[9:])
    assert hasattr(est, "params_")


def test_predict_surfaces():
    seqs = rule_sequences(12)
    est = small_est(max_epochs=10, patience=5).fit(seqs)
    test = rule_sequences(4, seed=99)
    records = est.predict_proba(test)
    assert all(0.0 < r.p < 1.0 for r in records)
    exact = est.predict_proba(test, exact=True)
    assert len(exact) == len(records)
    for a, b in zip(records, exact):
        assert abs(a.p - b.p) <= 1e-10
    labels = est.predict(test)
    assert labels.shape == (len(records),)
    assert set(labels.tolist()) <= {0, 1}
    ms = est.predict_multistep(test, 0.5)
    assert all(r.step > 1 for r in ms)
    with pytest.raises(ConfigError):
        est.predict_multistep(test, 0.15)
    assert 0.0 <= est.score(test) <= 1.0
    assert 0.0 <= est.score_accuracy(test) <= 1.0


def test_save_load_roundtrip(tmp_path):
    seqs = rule_sequences(12)
    est = small_est().fit(seqs)
    path = tmp_path / "model.npz"
    est.save(path)
    loaded = ATDKT.load(path)
    assert loaded.get_params()["d"] == 8
    assert loaded.n_kcs_ == est.n_kcs_
    test = rule_sequences(4, seed=99)
    a = est.predict_proba(test, exact=True)
    b = loaded.predict_proba(test, exact=True)
    assert [r.p for r in a] == [r.p for r in b]


def test_vanilla_variant_fit():
    seqs = rule_sequences(12)
    est = small_est(variant="no_qt_no_ik").fit(seqs)
    assert set(est.params_.tensors) == \
        {"x_embed", "lstm.wx", "lstm.wh", "lstm.b", "kt.w", "kt.b"}


def test_explicit_dims_override():
    seqs = rule_sequences(12)
    est = small_est(n_kcs=9, n_questions=11).fit(seqs)
    assert est.n_kcs_ == 9
    assert est.params_["x_embed"].data.shape == (18, 8)
    assert est.params_["q_embed"].data.shape == (11, 8)
