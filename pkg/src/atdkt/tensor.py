"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph lives on the tensors themselves: every non-leaf result holds a
TapeNode recording its inputs and a closure that maps the output gradient
to input gradients. backward() walks the graph once, iteratively, so deep
recurrent chains (hundreds of timesteps) do not hit the recursion limit.

Shape discipline is strict on purpose: elementwise ops accept identical
shapes or a scalar, nothing else. Silent broadcasting is where recurrent
models go quietly wrong, so mismatches raise ShapeError immediately.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

# exp() arguments are clamped to +/-EXP_CLAMP inside sigmoid and softmax.
# The induced output error is below 1e-13, small enough for the exactness
# guarantees elsewhere, while keeping saturated losses finite.
EXP_CLAMP = 30.0

# Probabilities entering a log() are clamped away from 0 and 1 by this much.
PROB_EPS = 1e-12

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class TapeNode:
    """One recorded operation: the input tensors and the gradient rule.

    ``backward`` takes the gradient of the loss with respect to the output
    and returns one gradient array (or None) per input, in order.
    """

    __slots__ = ("inputs", "backward")

    def __init__(self, inputs: tuple["Tensor", ...], backward: Callable):
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """A float64 array plus an optional gradient and tape position."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: TapeNode | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar for the common elementwise cases.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result, recording a tape node only when it can matter."""
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad or t.node is not None for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(tuple(inputs), backward)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every reachable leaf.

    ``loss`` must be scalar. Gradients add onto whatever is already in
    .grad, so callers zero parameters between steps. Repeated calls on the
    same graph therefore double the leaf gradients; that is intentional.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.node is None and not loss.requires_grad:
        return

    # Iterative postorder: inputs come before consumers, then walk reversed.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            topo.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if id(inp) not in visited and (inp.node is not None or inp.requires_grad):
                    stack.append((inp, False))

    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(topo):
        g = flow.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad and t.node is None:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g
        if t.node is None:
            continue
        input_grads = t.node.backward(g)
        for inp, ig in zip(t.node.inputs, input_grads):
            if ig is None or not (inp.requires_grad or inp.node is not None):
                continue
            acc = flow.get(id(inp))
            # Out-of-place accumulation: backward rules may hand back views
            # of g itself, and mutating those would corrupt sibling grads.
            flow[id(inp)] = ig if acc is None else acc + ig


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def _binary_operands(a, b, name: str) -> tuple[Tensor, Tensor]:
    """Validate operands: identical shapes, or one side scalar."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.data.ndim != 0 and b.data.ndim != 0 and a.shape != b.shape:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ")
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bw)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to ``shape`` (scalar operands only)."""
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if shape == () else g.reshape(shape)


# ---------------------------------------------------------------------------
# Matrix products


def matmul(a, b) -> Tensor:
    """Matrix product. 2D x 2D, batched ND x ND, or ND x 2D mixes.

    Leading (batch) dimensions must match exactly when both operands carry
    them; a 2D operand is shared across the other side's batch.
    """
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        # A 2D operand shared across a batch collects the batch sum.
        if ga.ndim > a.ndim:
            ga = ga.sum(axis=tuple(range(ga.ndim - a.ndim)))
        if gb.ndim > b.ndim:
            gb = gb.sum(axis=tuple(range(gb.ndim - b.ndim)))
        return ga, gb

    return _make(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map y = x @ w.T + b with w stored as [out, in]."""
    x = _as_tensor(x)
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: x {x.shape} needs last dim {w.shape} in-features")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} does not match out dim {w.shape[0]}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def bw(g):
        g2 = g.reshape(-1, w.shape[0])
        x2 = x.data.reshape(-1, w.shape[1])
        gx = (g2 @ w.data).reshape(x.shape)
        gw = g2.T @ x2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _make(out, inputs, bw)


# ---------------------------------------------------------------------------
# Activations


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    z = np.clip(x.data, -EXP_CLAMP, EXP_CLAMP)
    out = 1.0 / (1.0 + np.exp(-z))

    def bw(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), bw)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _make(out, (x,), bw)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0.0)

    def bw(g):
        return (g * (x.data > 0.0),)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# Softmax over masked scores


def masked_softmax(scores: Tensor, valid_len: int) -> Tensor:
    """Softmax over the first ``valid_len`` entries of a 1D score vector.

    Entries at and beyond ``valid_len`` come out exactly 0. valid_len must
    be at least 1: an all-masked distribution has no meaning here and is
    rejected rather than smoothed over.
    """
    scores = _as_tensor(scores)
    if scores.ndim != 1:
        raise ShapeError(f"masked_softmax: expected 1D scores, got {scores.shape}")
    n = scores.shape[0]
    if not 1 <= valid_len <= n:
        raise ShapeError(f"masked_softmax: valid_len {valid_len} outside [1, {n}]")
    mask = np.zeros(n, dtype=bool)
    mask[:valid_len] = True
    return _softmax_masked_lastaxis(scores, mask)


def softmax_masked(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax along the last axis with a boolean keep-mask.

    Masked positions are exactly 0 in the output. Every row must keep at
    least one position.
    """
    scores = _as_tensor(scores)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    if not mask.any(axis=-1).all():
        raise ShapeError("softmax_masked: some row has no valid positions")
    return _softmax_masked_lastaxis(scores, mask)


def _softmax_masked_lastaxis(scores: Tensor, mask: np.ndarray) -> Tensor:
    neg = np.where(mask, scores.data, -np.inf)
    shifted = neg - neg.max(axis=-1, keepdims=True)
    e = np.exp(np.clip(shifted, -EXP_CLAMP, EXP_CLAMP)) * mask
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        # dx_i = out_i * (g_i - sum_j out_j g_j); zeros stay zero.
        inner = (out * g).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _make(out, (scores,), bw)


# ---------------------------------------------------------------------------
# Lookup tables and structural ops


def embedding(table: Tensor, idx) -> Tensor:
    """Row lookup table[idx]; idx is any integer array (or scalar)."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        bad = int(idx.min()) if idx.min() < 0 else int(idx.max())
        raise IndexError(f"embedding: index {bad} outside table of {table.shape[0]} rows")
    out = table.data[idx]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.ravel(), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(out, (table,), bw)


def stack_steps(tensors: Sequence[Tensor]) -> Tensor:
    """Stack T tensors of shape [B, d] into [B, T, d]."""
    shape0 = tensors[0].shape
    for t in tensors:
        if t.shape != shape0:
            raise ShapeError(f"stack_steps: mixed shapes {shape0} and {t.shape}")
    out = np.stack([t.data for t in tensors], axis=1)

    def bw(g):
        return tuple(np.ascontiguousarray(g[:, i]) for i in range(len(tensors)))

    return _make(out, tuple(tensors), bw)


def take_step(x: Tensor, t: int) -> Tensor:
    """Select x[:, t] from a [B, T, ...] tensor."""
    out = np.ascontiguousarray(x.data[:, t])

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, t] = g
        return (gx,)

    return _make(out, (x,), bw)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """Select x[..., start:stop] along the last axis."""
    out = np.ascontiguousarray(x.data[..., start:stop])

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return (gx,)

    return _make(out, (x,), bw)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[B, T, d] -> [B, heads, T, d/heads]."""
    b, t, d = x.shape
    if d % heads:
        raise ShapeError(f"split_heads: d={d} not divisible by heads={heads}")
    out = x.data.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)

    def bw(g):
        return (g.transpose(0, 2, 1, 3).reshape(b, t, d),)

    return _make(np.ascontiguousarray(out), (x,), bw)


def merge_heads(x: Tensor) -> Tensor:
    """[B, heads, T, dh] -> [B, T, heads*dh]."""
    b, h, t, dh = x.shape
    out = x.data.transpose(0, 2, 1, 3).reshape(b, t, h * dh)

    def bw(g):
        return (np.ascontiguousarray(g.reshape(b, t, h, dh).transpose(0, 2, 1, 3)),)

    return _make(np.ascontiguousarray(out), (x,), bw)


def transpose_last(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose_last: needs at least 2D, got {x.shape}")
    out = np.ascontiguousarray(np.swapaxes(x.data, -1, -2))

    def bw(g):
        return (np.swapaxes(g, -1, -2),)

    return _make(out, (x,), bw)


def squeeze_last(x: Tensor) -> Tensor:
    """Drop a trailing axis of size 1."""
    if x.shape[-1] != 1:
        raise ShapeError(f"squeeze_last: last axis must be 1, got {x.shape}")
    out = x.data[..., 0]

    def bw(g):
        return (g[..., None],)

    return _make(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then scale/shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        axes = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(out, (x, gamma, beta), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    out = x.data * keep

    def bw(g):
        return (g * keep,)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# Reductions and losses


def mean(x: Tensor) -> Tensor:
    out = np.asarray(x.data.mean())
    n = x.data.size

    def bw(g):
        return (np.full_like(x.data, float(g) / n),)

    return _make(out, (x,), bw)


def tsum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())

    def bw(g):
        return (np.full_like(x.data, float(g)),)

    return _make(out, (x,), bw)


def _clamped(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Clamp probabilities into (0, 1); also report where the clamp bound."""
    lo, hi = PROB_EPS, 1.0 - PROB_EPS
    clipped = np.clip(p, lo, hi)
    interior = (p > lo) & (p < hi)
    return clipped, interior


def bce_indexed(probs: Tensor, kc_idx: np.ndarray, targets: np.ndarray,
                valid: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of probs[b, t, kc_idx[b, t]] vs targets.

    ``valid`` marks which (b, t) cells count. With no valid cells the loss
    is exactly 0 and carries no gradient.
    """
    valid = np.asarray(valid, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        return Tensor(0.0)
    b_ix, t_ix = np.nonzero(valid)
    k_ix = kc_idx[b_ix, t_ix]
    p, interior = _clamped(probs.data[b_ix, t_ix, k_ix])
    r = targets[b_ix, t_ix].astype(np.float64)
    loss = -(r * np.log(p) + (1.0 - r) * np.log(1.0 - p)).mean()

    def bw(g):
        gp = np.zeros_like(probs.data)
        # d/dp of BCE is (p - r) / (p (1 - p)); zero where the clamp bound.
        np.add.at(gp, (b_ix, t_ix, k_ix),
                  float(g) * interior * (p - r) / (p * (1.0 - p)) / count)
        return (gp,)

    return _make(np.asarray(loss), (probs,), bw)


def bce_multihot(probs: Tensor, targets: np.ndarray, valid: np.ndarray) -> Tensor:
    """Mean BCE over every (step, label) cell of valid steps."""
    valid = np.asarray(valid, dtype=bool)
    count = int(valid.sum()) * probs.shape[-1]
    if count == 0:
        return Tensor(0.0)
    w = valid[..., None].astype(np.float64)
    p, interior = _clamped(probs.data)
    r = targets.astype(np.float64)
    loss = (-(r * np.log(p) + (1.0 - r) * np.log(1.0 - p)) * w).sum() / count

    def bw(g):
        return (float(g) * w * interior * (p - r) / (p * (1.0 - p)) / count,)

    return _make(np.asarray(loss), (probs,), bw)


def masked_mse(pred: Tensor, targets: np.ndarray, valid: np.ndarray) -> Tensor:
    """Mean squared error over valid cells; 0 with no gradient when empty."""
    valid = np.asarray(valid, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        return Tensor(0.0)
    diff = (pred.data - targets) * valid
    loss = (diff * diff).sum() / count

    def bw(g):
        return (float(g) * 2.0 * diff / count,)

    return _make(np.asarray(loss), (pred,), bw)
