"""Shared test helpers: finite-difference oracle and toy data builders."""

import numpy as np
import pytest

from atdkt import InteractionSequence, Step, backward
from atdkt.tensor import Tensor


def fd_gradcheck(fn, tensors, rel_tol=1e-4, h=1e-5):
    """Compare backward() gradients against central finite differences.

    ``fn`` rebuilds a scalar loss from the current data of ``tensors``
    (a sequence or a name->Tensor mapping) each time it is called.
    Tolerance is relative to max(1, |analytic|, |numeric|) per coordinate.
    """
    if isinstance(tensors, dict):
        tensors = list(tensors.values())
    for t in tensors:
        t.grad = None
    backward(fn())
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.ravel()
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * h)
        numeric = numeric.reshape(t.data.shape)
        denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
        gap = (np.abs(analytic - numeric) / denom).max()
        worst = max(worst, gap)
        assert gap <= rel_tol, f"gradient mismatch {gap:.2e} (tol {rel_tol:.0e})"
    return worst


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


def make_sequence(rng, sid, length, n_kcs, n_questions, multi_kc=False):
    """Random expanded sequence; with multi_kc, interactions may expand."""
    steps = []
    t = 0
    interaction = 0
    while t < length:
        q = int(rng.integers(n_questions))
        if multi_kc and t + 1 < length and rng.random() < 0.3:
            kcs = tuple(sorted(rng.choice(n_kcs, size=2, replace=False).tolist()))
        else:
            kcs = (int(rng.integers(n_kcs)),)
        r = int(rng.integers(2))
        for kc in kcs:
            if t >= length:
                break
            steps.append(Step(q, kc, kcs, r, interaction))
            t += 1
        interaction += 1
    return InteractionSequence(sid, steps)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def record_acceptance(config, line: str) -> None:
    """Queue a line for the acceptance section of the terminal summary."""
    lines = getattr(config, "_acceptance_lines", None)
    if lines is None:
        lines = config._acceptance_lines = []
    lines.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance")
        for line in lines:
            terminalreporter.write_line(line)
