"""End-to-end acceptance properties.

Each test covers one acceptance property and reports a PASS/FAIL line in
the terminal summary (see the acceptance section printed after the run).
The synthetic learning benchmark trains real models and dominates the
suite's runtime; everything else finishes in seconds.
"""

import json
import math
import os
import time
from contextlib import contextmanager

import numpy as np
import pytest

import atdkt.tensor as T
from atdkt import (HYPERPARAM_GRID, InteractionSequence, ModelConfig,
                   MultiStepConfig, Step, SynthSpec, TrainConfig, accuracy,
                   auc, dataset_stats, expand_kc_level, filter_and_truncate,
                   forward_batch, forward_sequence, generate, infer_dims,
                   init_params, kfold_split, load_interactions, make_batch,
                   multistep_eval, one_step_eval, oracle_auc_bound,
                   run_cv, train_fold)
from atdkt.metrics import PredictionRecord
from atdkt.model import total_loss
from atdkt.training import grid_size

from conftest import fd_gradcheck, make_sequence, record_acceptance


@contextmanager
def criterion(request, name):
    """Record one PASS/FAIL summary line for an acceptance property."""
    try:
        yield
    except BaseException:
        record_acceptance(request.config, f"FAIL  {name}")
        raise
    record_acceptance(request.config, f"PASS  {name}")


def leaf(rng, *shape, scale=1.0):
    return T.Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


# ---------------------------------------------------------------------------
# gradient suite


def _check_ops(rng):
    """Finite-difference check every autodiff operation once."""
    a = leaf(rng, 3, 4)
    b = leaf(rng, 3, 4)
    fd_gradcheck(lambda: T.mean(T.add(a, b)), [a, b])
    fd_gradcheck(lambda: T.mean(T.sub(a, b)), [a, b])
    fd_gradcheck(lambda: T.mean(T.mul(a, b)), [a, b])
    fd_gradcheck(lambda: T.mean(T.mul(a, 2.5)), [a])  # scalar arm

    m1 = leaf(rng, 3, 4)
    m2 = leaf(rng, 4, 2)
    fd_gradcheck(lambda: T.mean(T.matmul(m1, m2)), [m1, m2])
    b1 = leaf(rng, 2, 3, 4)
    b2 = leaf(rng, 2, 4, 2)
    fd_gradcheck(lambda: T.mean(T.matmul(b1, b2)), [b1, b2])

    x = leaf(rng, 5, 4)
    w = leaf(rng, 3, 4)
    bias = leaf(rng, 3)
    fd_gradcheck(lambda: T.mean(T.linear(x, w, bias)), [x, w, bias])
    fd_gradcheck(lambda: T.mean(T.linear(x, w)), [x, w])

    z = leaf(rng, 3, 4)
    fd_gradcheck(lambda: T.mean(T.sigmoid(z)), [z])
    fd_gradcheck(lambda: T.mean(T.tanh(z)), [z])
    # keep relu inputs away from the kink: FD straddles it otherwise
    rz = T.Tensor(np.sign(rng.normal(size=(3, 4))) * (0.3 + rng.random((3, 4))),
                  requires_grad=True)
    fd_gradcheck(lambda: T.mean(T.relu(rz)), [rz])

    s = leaf(rng, 5)
    fd_gradcheck(lambda: T.mean(T.masked_softmax(s, 3)), [s])
    s2 = leaf(rng, 2, 4)
    keep = np.array([[True, True, False, True], [True, False, True, True]])
    fd_gradcheck(lambda: T.mean(T.softmax_masked(s2, keep)), [s2])

    table = leaf(rng, 6, 4)
    idx = rng.integers(0, 6, size=(2, 3))
    fd_gradcheck(lambda: T.mean(T.embedding(table, idx)), [table])

    steps = [leaf(rng, 2, 4) for _ in range(3)]
    fd_gradcheck(lambda: T.mean(T.stack_steps(steps)), steps)
    seq = leaf(rng, 2, 3, 4)
    fd_gradcheck(lambda: T.mean(T.take_step(seq, 1)), [seq])
    fd_gradcheck(lambda: T.mean(T.slice_last(seq, 1, 3)), [seq])
    fd_gradcheck(lambda: T.mean(T.merge_heads(T.split_heads(seq, 2))), [seq])
    fd_gradcheck(lambda: T.mean(T.transpose_last(seq)), [seq])
    col = leaf(rng, 2, 3, 1)
    fd_gradcheck(lambda: T.mean(T.squeeze_last(col)), [col])

    g = leaf(rng, 4)
    beta = leaf(rng, 4)
    fd_gradcheck(lambda: T.mean(T.layer_norm(a, g, beta)), [a, g, beta])

    dz = leaf(rng, 3, 4)
    seed = int(rng.integers(1 << 30))
    fd_gradcheck(
        lambda: T.mean(T.dropout(dz, 0.4, np.random.default_rng(seed))), [dz])

    fd_gradcheck(lambda: T.tsum(T.mul(a, a)), [a])

    # losses: probabilities through sigmoid stay off the clamp bounds
    logits = leaf(rng, 2, 3, 5)
    kc_idx = rng.integers(0, 5, size=(2, 3))
    targets = rng.integers(0, 2, size=(2, 3))
    valid = np.array([[True, True, False], [True, False, False]])
    fd_gradcheck(
        lambda: T.bce_indexed(T.sigmoid(logits), kc_idx, targets, valid),
        [logits])
    multi = rng.integers(0, 2, size=(2, 3, 5))
    fd_gradcheck(
        lambda: T.bce_multihot(T.sigmoid(logits), multi, valid), [logits])
    pred = leaf(rng, 2, 3)
    rates = rng.random((2, 3))
    fd_gradcheck(lambda: T.masked_mse(pred, rates, valid), [pred])


def test_gradient_suite(request):
    with criterion(request, "gradient suite: ops + full loss vs central FD"):
        t0 = time.perf_counter()
        cfg = ModelConfig(n_kcs=3, n_questions=2, d=4, heads=2, enc_layers=1,
                          max_seq_len=4, delta=1, beta_qt=0.5, beta_ik=0.5)
        for seed in range(20):
            rng = np.random.default_rng(seed)
            _check_ops(rng)
            seq = make_sequence(rng, "s", 3, cfg.n_kcs, cfg.n_questions,
                                multi_kc=True)
            batch = make_batch([seq], cfg.n_kcs, cfg.n_questions)
            params = init_params(cfg, rng=seed)
            fd_gradcheck(lambda: forward_batch(params, batch).total,
                         dict(params.named()), rel_tol=1e-4)
        elapsed = time.perf_counter() - t0
        assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# metric oracles


def _pairwise_auc(scores, targets):
    """All positive/negative pairs compared directly; ties count half."""
    pos = scores[targets == 1][:, None]
    neg = scores[targets == 0][None, :]
    wins = (pos > neg).sum() + 0.5 * (pos == neg).sum()
    return wins / (pos.shape[0] * neg.shape[1])


def test_metric_oracles(request):
    with criterion(request, "metrics: auc vs pairwise oracle, exact accuracy"):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(2, 501))
            targets = rng.integers(0, 2, size=n)
            if targets.min() == targets.max():
                targets[0] = 1 - targets[0]
            # quantized scores force ties through the tie-handling path
            scores = rng.integers(0, 20, size=n) / 19.0
            records = [PredictionRecord("s", i + 2, 0, float(p), int(r))
                       for i, (p, r) in enumerate(zip(scores, targets))]
            assert abs(auc(records) - _pairwise_auc(scores, targets)) <= 1e-12
            expected_acc = float(((scores >= 0.5) == targets).mean())
            assert accuracy(records) == expected_acc


# ---------------------------------------------------------------------------
# baseline-variant identity


def _reference_dkt(params, seq):
    """Straight-line numpy LSTM over response-shifted KC embeddings."""
    cfg = params.config
    d, n = cfg.d, cfg.n_kcs
    x_embed = params["x_embed"].data
    wx, wh, b = (params["lstm.wx"].data, params["lstm.wh"].data,
                 params["lstm.b"].data)
    kt_w, kt_b = params["kt.w"].data, params["kt.b"].data

    def sig(v):
        return 1.0 / (1.0 + np.exp(-np.clip(v, -30, 30)))

    h = np.zeros(d)
    cell = np.zeros(d)
    rows = []
    for step in seq.steps:
        x = x_embed[step.kc_id + step.response * n]
        gates = wx @ x + wh @ h + b
        i, f = sig(gates[:d]), sig(gates[d:2 * d])
        g, o = np.tanh(gates[2 * d:3 * d]), sig(gates[3 * d:])
        cell = f * cell + i * g
        h = o * np.tanh(cell)
        rows.append(sig(kt_w @ h + kt_b))
    return np.array(rows)


def test_baseline_variant_identity(request):
    with criterion(request, "baseline variant matches independent DKT, 1e-10"):
        cfg = ModelConfig(n_kcs=5, n_questions=4, d=8, heads=2, enc_layers=1,
                          max_seq_len=32, delta=1, variant="no_qt_no_ik")
        worst = 0.0
        for seed in range(50):
            rng = np.random.default_rng(100 + seed)
            params = init_params(cfg, rng=rng)
            # perturb away from init so the check is not near-zero-trivial
            for _, tensor in params.named():
                tensor.data += rng.normal(0.0, 0.3, tensor.data.shape)
            seq = make_sequence(rng, "s", int(rng.integers(3, 25)),
                                cfg.n_kcs, cfg.n_questions, multi_kc=True)
            step_outs, _ = forward_sequence(params, seq)
            rows = np.array([s.kt_probs for s in step_outs])
            gap = np.abs(rows - _reference_dkt(params, seq)).max()
            worst = max(worst, gap)
        assert worst <= 1e-10, f"worst per-step gap {worst:.2e}"


# ---------------------------------------------------------------------------
# loss identities


def test_loss_identities(request):
    with criterion(request, "loss identities: ln2 at 0.5, gated IK, additivity"):
        cfg = ModelConfig(n_kcs=3, n_questions=2, d=4, heads=2, enc_layers=1,
                          max_seq_len=8, delta=1, beta_qt=0.5, beta_ik=0.5)
        rng = np.random.default_rng(0)
        seq = make_sequence(rng, "s", 6, cfg.n_kcs, cfg.n_questions,
                            multi_kc=True)
        batch = make_batch([seq], cfg.n_kcs, cfg.n_questions)

        zeroed = init_params(cfg, rng=0)
        for _, tensor in zeroed.named():
            tensor.data[...] = 0.0
        out = forward_batch(zeroed, batch)
        assert abs(out.l_kt.data - math.log(2)) <= 1e-9
        assert abs(out.l_qt.data - math.log(2)) <= 1e-9

        gated = ModelConfig(**{**cfg.to_dict(), "delta": len(seq)})
        out_gated = forward_batch(init_params(gated, rng=1), batch)
        assert out_gated.l_ik.data == 0.0

        params = init_params(cfg, rng=2)
        out = forward_batch(params, batch)
        expected = (out.l_kt.data + cfg.beta_qt * out.l_qt.data
                    + cfg.beta_ik * out.l_ik.data)
        assert abs(out.total.data - expected) <= 1e-9

        # gradient additivity: separate backward passes sum to the joint one
        def grads(loss_builder):
            params.zero_grad()
            T.backward(loss_builder())
            return {k: (t.grad.copy() if t.grad is not None
                        else np.zeros_like(t.data))
                    for k, t in params.named()}

        g_kt = grads(lambda: forward_batch(params, batch).l_kt)
        g_qt = grads(lambda: forward_batch(params, batch).l_qt)
        g_ik = grads(lambda: forward_batch(params, batch).l_ik)
        g_total = grads(lambda: forward_batch(params, batch).total)
        for k in g_total:
            combo = g_kt[k] + cfg.beta_qt * g_qt[k] + cfg.beta_ik * g_ik[k]
            assert np.abs(combo - g_total[k]).max() <= 1e-9


# ---------------------------------------------------------------------------
# synthetic learning benchmark


def _oracle_bound_for(truth, seqs, students):
    """Truth-probability AUC over the next-step targets of these students."""
    chosen = set(students)
    recs = [PredictionRecord(s.student_id, t + 1, s.steps[t].kc_id, 0.5,
                             s.steps[t].response)
            for s in seqs if s.student_id in chosen
            for t in range(1, len(s.steps))]
    return oracle_auc_bound(truth, recs)


def test_synthetic_learning_benchmark(request):
    """Trains 5 CV folds plus a 3-seed ablation pair; takes ~15 minutes."""
    name = "synthetic benchmark: CV AUC vs oracle bound, full > baseline"
    with criterion(request, name):
        t0 = time.perf_counter()
        spec = SynthSpec(seed=3)
        assert spec.slip == 0.1 and spec.guess == 0.1
        result = generate(spec)
        stats = dataset_stats(result.interactions)
        assert stats["students"] == 500
        assert stats["kcs"] == 20 and stats["questions"] == 200
        assert abs(stats["avg_kcs_per_question"] - 1.36) <= 0.005
        assert 28_000 <= stats["interactions"] <= 32_000

        seqs = filter_and_truncate(expand_kc_level(result.interactions))
        n_kcs, n_questions = infer_dims(seqs)
        folds = kfold_split(seqs, k=5, seed=0)

        def model_cfg(variant):
            # positional off: the simulated process is position-stationary,
            # so the table only adds variance here
            return ModelConfig(n_kcs=n_kcs, n_questions=n_questions, d=64,
                               heads=4, enc_layers=1, max_seq_len=200,
                               delta=10, beta_qt=0.5, beta_ik=0.5,
                               variant=variant, positional=False)

        def train_cfg(seed):
            return TrainConfig(lr=1e-3, batch_size=32, max_epochs=120,
                               patience=15, seed=seed)

        report = run_cv(seqs, folds, model_cfg("full"), train_cfg(0))
        assert not report.incomplete
        cv_mean = report.auc_mean
        bound = float(np.mean([
            _oracle_bound_for(result.truth, seqs,
                              folds.assignment(i).test_students)
            for i in range(5)]))
        assert cv_mean >= 0.70, f"cv mean {cv_mean:.4f}"
        assert abs(cv_mean - bound) <= 0.05, (
            f"cv mean {cv_mean:.4f} strays from bound {bound:.4f}")
        # generator-module invariant: no training run beats the oracle
        assert cv_mean <= bound + 0.02, (
            f"cv mean {cv_mean:.4f} exceeds bound {bound:.4f} + 0.02")

        # ablation ordering on fold 0 over 3 seeds; the CV's fold 0 already
        # is the full model at seed 0, so reuse it
        asn0 = folds.assignment(0)
        full_aucs = [report.fold_results[0].test_auc]
        vanilla_aucs = []
        for seed in (1, 2):
            fr, _, _ = train_fold(seqs, asn0, model_cfg("full"),
                                  train_cfg(seed))
            full_aucs.append(fr.test_auc)
        for seed in (0, 1, 2):
            fr, _, _ = train_fold(seqs, asn0, model_cfg("no_qt_no_ik"),
                                  train_cfg(seed))
            vanilla_aucs.append(fr.test_auc)
        margin = float(np.mean(full_aucs) - np.mean(vanilla_aucs))
        assert margin >= 0.005, (
            f"full {np.mean(full_aucs):.4f} vs "
            f"vanilla {np.mean(vanilla_aucs):.4f}")

        minutes = (time.perf_counter() - t0) / 60.0
        assert minutes <= 22.0, f"benchmark took {minutes:.1f} min"
    record_acceptance(request.config,
                      f"      cv {cv_mean:.4f} bound {bound:.4f} "
                      f"margin +{margin:.4f} wall {minutes:.1f}m")


# ---------------------------------------------------------------------------
# accumulative-protocol properties


def _trained_toy_params(cfg, seed=0):
    """Lightly trained params so predictions are not symmetric around 0.5."""
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng=rng)
    for _, tensor in params.named():
        tensor.data += rng.normal(0.0, 0.2, tensor.data.shape)
    return params


def test_multistep_protocol(request):
    with criterion(request, "multistep: one-step agreement + no leakage"):
        cfg = ModelConfig(n_kcs=6, n_questions=5, d=8, heads=2, enc_layers=1,
                          max_seq_len=64, delta=2)
        params = _trained_toy_params(cfg)
        rng = np.random.default_rng(5)
        seqs = [make_sequence(rng, f"s{i}", int(rng.integers(8, 40)),
                              cfg.n_kcs, cfg.n_questions, multi_kc=True)
                for i in range(12)]

        from atdkt.evaluation import FRACTION_GRID, observed_steps
        checked = 0
        for seq in seqs:
            fractions = [f for f in FRACTION_GRID
                         if observed_steps(seq, f) == len(seq) - 1]
            if not fractions:
                continue
            ms_cfg = MultiStepConfig(observed_fraction=max(fractions))
            ms = multistep_eval(params, [seq], ms_cfg)
            assert len(ms) == 1
            last = [r for r in one_step_eval(params, [seq])
                    if r.step == len(seq)][0]
            assert ms[0].p == last.p and ms[0].kc_id == last.kc_id
            checked += 1
        assert checked >= 5, "toy sample never hit the one-step-left case"

        # corrupting unobserved ground truth must not move any prediction
        for feedback in ("binarize", "probability"):
            ms_cfg = MultiStepConfig(observed_fraction=0.5, feedback=feedback)
            base = multistep_eval(params, seqs, ms_cfg)
            corrupted = []
            for seq in seqs:
                n_obs = observed_steps(seq, 0.5)
                steps = [Step(s.question_id, s.kc_id, s.kc_set,
                              s.response if t < n_obs else 1 - s.response,
                              s.interaction)
                         for t, s in enumerate(seq.steps)]
                corrupted.append(InteractionSequence(seq.student_id, steps))
            flipped = multistep_eval(params, corrupted, ms_cfg)
            assert [r.p for r in base] == [r.p for r in flipped]
            assert [r.kc_id for r in base] == [r.kc_id for r in flipped]


# ---------------------------------------------------------------------------
# training-protocol conformance


def _tiny_corpus():
    spec = SynthSpec(students=12, n_kcs=5, n_questions=10, kc_mean=1.3,
                     kc_max=2, min_questions=6, max_questions=9, seed=0)
    return filter_and_truncate(expand_kc_level(generate(spec).interactions))


def test_training_protocol_conformance(request, tmp_path):
    with criterion(request, "protocol: stopping, folds, grids, bit-for-bit"):
        # early-stopping defaults are the protocol constants
        tc = TrainConfig()
        assert tc.patience == 10 and tc.max_epochs == 200
        assert tuple(HYPERPARAM_GRID) == ("d", "enc_layers", "heads", "lr",
                                          "delta", "beta_qt", "beta_ik")
        assert HYPERPARAM_GRID["d"] == (64, 256)
        assert HYPERPARAM_GRID["enc_layers"] == (1, 2, 4)
        assert HYPERPARAM_GRID["heads"] == (4, 8)
        assert HYPERPARAM_GRID["lr"] == (1e-3, 1e-4, 1e-5)
        assert HYPERPARAM_GRID["delta"] == (0, 10, 30, 50, 70, 100, 120, 150)
        assert HYPERPARAM_GRID["beta_qt"] == (0.01, 0.1, 0.3, 0.5, 0.7, 1.0)
        assert HYPERPARAM_GRID["beta_ik"] == (0.01, 0.1, 0.3, 0.5, 0.7, 1.0)
        assert grid_size(HYPERPARAM_GRID) == 2 * 3 * 2 * 3 * 8 * 6 * 6

        # 5-fold student-level partition with the rotation rule
        seqs = _tiny_corpus()
        split = kfold_split(seqs, k=5, seed=0)
        students = {s.student_id for s in seqs}
        assert sorted(sum(split.groups, [])) == sorted(students)
        for i in range(5):
            a = split.assignment(i)
            assert set(a.test_students) == set(split.groups[i])
            assert set(a.valid_students) == set(split.groups[(i + 1) % 5])
            assert not (set(a.train_students) & set(a.test_students))
            assert not (set(a.train_students) & set(a.valid_students))

        # manifest round-trips
        assert TrainConfig.from_dict(tc.to_dict()) == tc
        mc = ModelConfig(n_kcs=5, n_questions=10, d=4, heads=2, enc_layers=1,
                         max_seq_len=24, delta=0)
        assert ModelConfig.from_dict(mc.to_dict()) == mc
        split.save(tmp_path / "folds.json")
        from atdkt import FoldSplit
        reloaded = FoldSplit.load(tmp_path / "folds.json")
        assert reloaded.groups == split.groups

        # seeded rerun reproduces persisted metrics bit-for-bit
        tc_small = TrainConfig(batch_size=8, max_epochs=3, patience=2, seed=0)
        split3 = kfold_split(seqs, k=3, seed=0)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        run_cv(seqs, split3, mc, tc_small, out_dir=out_a)
        run_cv(seqs, split3, mc, tc_small, out_dir=out_b)
        for rel in ("metrics.json", "fold0/metrics.json", "fold1/metrics.json",
                    "fold2/metrics.json"):
            assert (out_a / rel).read_bytes() == (out_b / rel).read_bytes()


# ---------------------------------------------------------------------------
# data-layer conformance


def test_data_layer_conformance(request):
    with criterion(request, "data layer: filtering, chunking, expansion"):
        rng = np.random.default_rng(11)
        short = make_sequence(rng, "short", 2, 5, 4)
        keep = make_sequence(rng, "keep", 3, 5, 4)
        long = make_sequence(rng, "long", 450, 5, 4)
        out = filter_and_truncate([short, keep, long], min_len=3, max_len=200)
        assert {s.student_id for s in out} == {"keep", "long"}
        chunks = [s for s in out if s.student_id == "long"]
        assert [len(c) for c in chunks] == [200, 200, 50]
        rebuilt = [step for c in chunks for step in c.steps]
        assert rebuilt == list(long.steps)

        # expansion: one step per KC, everything else conserved
        from atdkt import RawInteraction
        raws = [RawInteraction(student_id="a", question_id=int(q),
                               kc_ids=tuple(sorted(rng.choice(
                                   8, size=int(rng.integers(1, 4)),
                                   replace=False).tolist())),
                               response=int(rng.integers(2)), timestamp=t)
                for t, q in enumerate(rng.integers(0, 6, size=60))]
        expanded = expand_kc_level(raws)
        assert sum(len(s) for s in expanded) == sum(len(r.kc_ids) for r in raws)
        by_interaction = {}
        for s in expanded:
            for step in s.steps:
                by_interaction.setdefault(step.interaction, []).append(step)
        for i, steps in by_interaction.items():
            assert len({s.response for s in steps}) == 1
            assert len({s.question_id for s in steps}) == 1
            assert [s.kc_id for s in steps] == sorted(set(raws[i].kc_ids))


def test_real_dataset_tag_density(request):
    path = os.environ.get("ATDKT_AL2005_CSV")
    name = "real-corpus tag density (1.3634 +- 0.0005)"
    if not path:
        record_acceptance(request.config,
                          f"SKIP  {name}: set ATDKT_AL2005_CSV to run")
        pytest.skip("real corpus not supplied")
    with criterion(request, name):
        stats = dataset_stats(load_interactions(path))
        assert abs(stats["avg_kcs_per_question"] - 1.3634) <= 0.0005
