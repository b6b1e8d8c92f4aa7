"""The knowledge-tracing computation graph.

Three coupled pieces share one recurrence:

* a causal multi-head attention encoder turns question-plus-KC embeddings
  a_t into contextual vectors z_t, supervised by a question-tagging head
  that predicts each question's KC membership;
* an LSTM consumes the fused input m_t = z_t + c_t + x_t and tracks the
  student's hidden knowledge state h_t;
* from h_t, a response head predicts per-KC correctness probabilities and
  a prior-knowledge head predicts the student's running scoring rate.

The ``no_qt`` / ``no_ik`` variants drop the corresponding auxiliary loss
(and its unused head); ``no_qt_no_ik`` degrades the whole graph to the
classic DKT model: x_t-only recurrence and a single linear response layer.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .data import Batch, InteractionSequence, make_batch
from .errors import ConfigError, EvaluationError, ShapeError
from .tensor import Tensor

VARIANTS = ("full", "no_qt", "no_ik", "no_qt_no_ik")

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture and loss hyperparameters."""

    n_kcs: int
    n_questions: int
    d: int = 64
    heads: int = 4
    enc_layers: int = 1
    max_seq_len: int = 200
    delta: int = 10          # IK warm-up: steps with position <= delta carry no IK loss
    beta_qt: float = 0.5
    beta_ik: float = 0.5
    variant: str = "full"
    positional: bool = True   # add learned position rows to a_t
    scaled_attention: bool = True
    dropout: float = 0.0
    ff_mult: int = 4

    def __post_init__(self):
        if self.n_kcs < 1 or self.n_questions < 1:
            raise ConfigError(f"need positive id ranges, got N={self.n_kcs}, M={self.n_questions}")
        if self.d < 2 or self.d % 2:
            raise ConfigError(f"d must be even and >= 2, got {self.d}")
        if self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.enc_layers < 1:
            raise ConfigError(f"enc_layers must be >= 1, got {self.enc_layers}")
        if self.max_seq_len < 1:
            raise ConfigError(f"max_seq_len must be >= 1, got {self.max_seq_len}")
        if self.delta < 0:
            raise ConfigError(f"delta must be >= 0, got {self.delta}")
        if self.beta_qt < 0 or self.beta_ik < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant {self.variant!r} not one of {VARIANTS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**dict(d))


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every trainable array's name and shape, in a fixed order."""
    d, n, m = cfg.d, cfg.n_kcs, cfg.n_questions
    shapes: dict[str, tuple[int, ...]] = {}

    def mlp(prefix: str, out: int) -> None:
        shapes[f"{prefix}.w1"] = (d // 2, d)
        shapes[f"{prefix}.b1"] = (d // 2,)
        shapes[f"{prefix}.w2"] = (out, d // 2)
        shapes[f"{prefix}.b2"] = (out,)

    if cfg.variant == "no_qt_no_ik":
        shapes["x_embed"] = (2 * n, d)
        shapes["lstm.wx"] = (4 * d, d)
        shapes["lstm.wh"] = (4 * d, d)
        shapes["lstm.b"] = (4 * d,)
        shapes["kt.w"] = (n, d)
        shapes["kt.b"] = (n,)
        return shapes

    shapes["q_embed"] = (m, d)
    shapes["c_embed"] = (n, d)
    shapes["x_embed"] = (2 * n, d)
    if cfg.positional:
        shapes["pos_embed"] = (cfg.max_seq_len, d)
    for layer in range(cfg.enc_layers):
        p = f"enc{layer}."
        for nm in ("wq", "wk", "wv", "wo"):
            shapes[p + nm] = (d, d)
        for nm in ("bq", "bk", "bv", "bo"):
            shapes[p + nm] = (d,)
        shapes[p + "ff_w1"] = (cfg.ff_mult * d, d)
        shapes[p + "ff_b1"] = (cfg.ff_mult * d,)
        shapes[p + "ff_w2"] = (d, cfg.ff_mult * d)
        shapes[p + "ff_b2"] = (d,)
        shapes[p + "ln1_g"] = (d,)
        shapes[p + "ln1_b"] = (d,)
        shapes[p + "ln2_g"] = (d,)
        shapes[p + "ln2_b"] = (d,)
    shapes["lstm.wx"] = (4 * d, d)
    shapes["lstm.wh"] = (4 * d, d)
    shapes["lstm.b"] = (4 * d,)
    if cfg.variant != "no_qt":
        mlp("qt", n)
    if cfg.variant != "no_ik":
        mlp("ik", 1)
    mlp("kt", n)
    return shapes


class ModelParams:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named(self) -> list[tuple[str, Tensor]]:
        return list(self.tensors.items())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def restore(self, snap: Mapping[str, np.ndarray]) -> None:
        for k, t in self.tensors.items():
            t.data[...] = snap[k]


ENC_OUT_GAIN = 0.05


def init_params(cfg: ModelConfig, rng: int | np.random.Generator = 0) -> ModelParams:
    """Fresh parameters: U(+-1/sqrt(fan_in)) matrices, zero biases,
    N(0, 0.02) embedding tables, unit layer-norm gains, forget bias 1.

    The last encoder layer's output gain starts at ENC_OUT_GAIN instead of
    1 so the fused recurrence input z + c + x is balanced at init: the
    norm puts z at unit scale while the embedding tables start near 0.02,
    and an encoder output that swamps the response signal measurably slows
    the prediction head's training. The gain is learned like any other.
    """
    rng = np.random.default_rng(rng)
    tensors: dict[str, Tensor] = {}
    last_gain = f"enc{cfg.enc_layers - 1}.ln2_g"
    for name, shape in param_shapes(cfg).items():
        if name.endswith("_embed"):
            data = rng.normal(0.0, 0.02, shape)
        elif name == last_gain:
            data = np.full(shape, ENC_OUT_GAIN)
        elif name.endswith("_g"):
            data = np.ones(shape)
        elif len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[1])
            data = rng.uniform(-bound, bound, shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data, requires_grad=True)
    tensors["lstm.b"].data[cfg.d:2 * cfg.d] = 1.0
    return ModelParams(cfg, tensors)


# ---------------------------------------------------------------------------
# Graph pieces. All accept a leading batch/time shape: [..., d].


def embed_step(params: ModelParams, question_id, kc_id, response):
    """Return (a_t, c_t, x_t) for one step or an index array of steps."""
    q = T.embedding(params["q_embed"], question_id)
    c = T.embedding(params["c_embed"], kc_id)
    x = T.embedding(params["x_embed"],
                    np.asarray(kc_id) + np.asarray(response) * params.config.n_kcs)
    return T.add(q, c), c, x


def question_encoder(params: ModelParams, a: Tensor,
                     rng: np.random.Generator | None = None) -> Tensor:
    """Causal self-attention encoder over [B, T, d] question vectors.

    Position t sees positions 1..t only, so appending steps never changes
    earlier outputs. Standard post-norm blocks: attention and a 4d-wide
    feed-forward, each with a residual connection and layer norm.
    """
    cfg = params.config
    b, t, d = a.shape
    causal = np.tril(np.ones((t, t), dtype=bool))
    scale = 1.0 / np.sqrt(d / cfg.heads) if cfg.scaled_attention else 1.0
    x = a
    for layer in range(cfg.enc_layers):
        p = f"enc{layer}."
        qh = T.split_heads(T.linear(x, params[p + "wq"], params[p + "bq"]), cfg.heads)
        kh = T.split_heads(T.linear(x, params[p + "wk"], params[p + "bk"]), cfg.heads)
        vh = T.split_heads(T.linear(x, params[p + "wv"], params[p + "bv"]), cfg.heads)
        scores = T.matmul(qh, T.transpose_last(kh))
        if scale != 1.0:
            scores = T.mul(scores, scale)
        attn = T.softmax_masked(scores, causal)
        ctx = T.merge_heads(T.matmul(attn, vh))
        proj = T.linear(ctx, params[p + "wo"], params[p + "bo"])
        if cfg.dropout and rng is not None:
            proj = T.dropout(proj, cfg.dropout, rng)
        x = T.layer_norm(T.add(x, proj), params[p + "ln1_g"], params[p + "ln1_b"])
        ff = T.linear(T.relu(T.linear(x, params[p + "ff_w1"], params[p + "ff_b1"])),
                      params[p + "ff_w2"], params[p + "ff_b2"])
        if cfg.dropout and rng is not None:
            ff = T.dropout(ff, cfg.dropout, rng)
        x = T.layer_norm(T.add(x, ff), params[p + "ln2_g"], params[p + "ln2_b"])
    return x


def fuse(z: Tensor, c: Tensor, x: Tensor) -> Tensor:
    """Recurrence input m_t: elementwise sum of the three step vectors."""
    return T.add(T.add(z, c), x)


def lstm_step(params: ModelParams, h: Tensor, cell: Tensor, m: Tensor):
    """One LSTM cell update; works on [d] vectors or [B, d] batches."""
    d = params.config.d
    gates = T.add(T.linear(m, params["lstm.wx"], params["lstm.b"]),
                  T.linear(h, params["lstm.wh"]))
    i = T.sigmoid(T.slice_last(gates, 0, d))
    f = T.sigmoid(T.slice_last(gates, d, 2 * d))
    g = T.tanh(T.slice_last(gates, 2 * d, 3 * d))
    o = T.sigmoid(T.slice_last(gates, 3 * d, 4 * d))
    cell2 = T.add(T.mul(f, cell), T.mul(i, g))
    h2 = T.mul(o, T.tanh(cell2))
    return h2, cell2


def run_recurrence(params: ModelParams, m: Tensor) -> Tensor:
    """Unroll the LSTM over [B, T, d]; h_0 = cell_0 = 0."""
    b, t, d = m.shape
    h = Tensor(np.zeros((b, d)))
    cell = Tensor(np.zeros((b, d)))
    hs = []
    for step in range(t):
        h, cell = lstm_step(params, h, cell, T.take_step(m, step))
        hs.append(h)
    return T.stack_steps(hs)


def _mlp_head(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    hidden = T.relu(T.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return T.sigmoid(T.linear(hidden, params[f"{prefix}.w2"], params[f"{prefix}.b2"]))


def qt_head(params: ModelParams, z: Tensor) -> Tensor:
    """KC-membership probabilities [..., N] from encoder outputs."""
    return _mlp_head(params, "qt", z)


def ik_head(params: ModelParams, h: Tensor) -> Tensor:
    """Scoring-rate estimate [...] from hidden states."""
    return T.squeeze_last(_mlp_head(params, "ik", h))


def kt_head(params: ModelParams, h: Tensor) -> Tensor:
    """Per-KC correctness probabilities [..., N] from hidden states.

    The vanilla variant uses the classic single linear layer; all others
    use the two-layer non-linear head.
    """
    if params.config.variant == "no_qt_no_ik":
        return T.sigmoid(T.linear(h, params["kt.w"], params["kt.b"]))
    return _mlp_head(params, "kt", h)


# ---------------------------------------------------------------------------
# Losses


def loss_kt(kt_probs: Tensor, next_kc: np.ndarray, next_resp: np.ndarray,
            next_mask: np.ndarray) -> Tensor:
    """BCE of step t's prediction for step t+1's KC against its response."""
    return T.bce_indexed(kt_probs, next_kc, next_resp, next_mask)


def loss_qt(qt_probs: Tensor, qt_targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """BCE over all N membership slots of each valid step."""
    return T.bce_multihot(qt_probs, qt_targets, mask)


def loss_ik(ik_pred: Tensor, rates: np.ndarray, delta: int, mask: np.ndarray) -> Tensor:
    """Squared error on steps whose 1-based position exceeds delta."""
    t = ik_pred.shape[-1]
    gate = mask & (np.arange(1, t + 1) > delta)
    return T.masked_mse(ik_pred, rates, gate)


def total_loss(l_kt: Tensor, l_qt: Tensor | None, l_ik: Tensor | None,
               beta_qt: float, beta_ik: float, variant: str) -> Tensor:
    """L = L_KT + beta_qt * L_QT + beta_ik * L_IK, minus ablated terms."""
    total = l_kt
    if variant in ("full", "no_ik") and l_qt is not None:
        total = T.add(total, T.mul(l_qt, beta_qt))
    if variant in ("full", "no_qt") and l_ik is not None:
        total = T.add(total, T.mul(l_ik, beta_ik))
    return total


# ---------------------------------------------------------------------------
# Full forward pass


@dataclass
class ForwardOutput:
    """Batched tensors from one pass; auxiliary fields are None when the
    variant does not produce them."""

    a: Tensor | None
    z: Tensor | None
    m: Tensor
    h: Tensor
    qt_probs: Tensor | None
    ik_pred: Tensor | None
    kt_probs: Tensor
    l_kt: Tensor
    l_qt: Tensor | None
    l_ik: Tensor | None
    total: Tensor


def forward_batch(params: ModelParams, batch: Batch,
                  rng: np.random.Generator | None = None) -> ForwardOutput:
    """Run the variant's graph over a padded batch and compute its losses.

    Padding is end-aligned, so causal attention never lets a real step see
    a padded one, and the loss masks exclude padded cells entirely.
    """
    cfg = params.config
    x3 = T.embedding(params["x_embed"], batch.inter_idx)

    if cfg.variant == "no_qt_no_ik":
        h3 = run_recurrence(params, x3)
        kt = kt_head(params, h3)
        l_kt = loss_kt(kt, batch.next_kc, batch.next_resp, batch.next_mask)
        return ForwardOutput(a=None, z=None, m=x3, h=h3, qt_probs=None,
                             ik_pred=None, kt_probs=kt, l_kt=l_kt, l_qt=None,
                             l_ik=None, total=l_kt)

    b, t = batch.inter_idx.shape
    q3 = T.embedding(params["q_embed"], batch.question_idx)
    c3 = T.embedding(params["c_embed"], batch.kc_idx)
    a3 = T.add(q3, c3)
    if cfg.positional:
        if t > cfg.max_seq_len:
            raise ShapeError(
                f"batch has {t} steps but positions cover only {cfg.max_seq_len}")
        positions = np.broadcast_to(np.arange(t), (b, t))
        a3 = T.add(a3, T.embedding(params["pos_embed"], positions))
    z3 = question_encoder(params, a3, rng=rng)
    m3 = fuse(z3, c3, x3)
    h3 = run_recurrence(params, m3)
    kt = kt_head(params, h3)
    l_kt = loss_kt(kt, batch.next_kc, batch.next_resp, batch.next_mask)

    qt = l_qt = None
    if cfg.variant != "no_qt":
        qt = qt_head(params, z3)
        l_qt = loss_qt(qt, batch.qt_targets, batch.mask)
    ik = l_ik = None
    if cfg.variant != "no_ik":
        ik = ik_head(params, h3)
        l_ik = loss_ik(ik, batch.ik_targets, cfg.delta, batch.mask)

    total = total_loss(l_kt, l_qt, l_ik, cfg.beta_qt, cfg.beta_ik, cfg.variant)
    return ForwardOutput(a=a3, z=z3, m=m3, h=h3, qt_probs=qt, ik_pred=ik,
                         kt_probs=kt, l_kt=l_kt, l_qt=l_qt, l_ik=l_ik, total=total)


@dataclass
class StepOutputs:
    """One step's vectors and head outputs (None where the variant has none)."""

    a: np.ndarray | None
    z: np.ndarray | None
    m: np.ndarray
    h: np.ndarray
    qt_probs: np.ndarray | None
    ik_pred: float | None
    kt_probs: np.ndarray


def forward_sequence(params: ModelParams, seq: InteractionSequence
                     ) -> tuple[list[StepOutputs], dict[str, float]]:
    """Teacher-forced pass over one sequence; per-step arrays plus losses."""
    cfg = params.config
    batch = make_batch([seq], cfg.n_kcs, cfg.n_questions)
    with T.no_grad():
        out = forward_batch(params, batch)
    steps = []
    for i in range(len(seq)):
        steps.append(StepOutputs(
            a=None if out.a is None else out.a.data[0, i],
            z=None if out.z is None else out.z.data[0, i],
            m=out.m.data[0, i],
            h=out.h.data[0, i],
            qt_probs=None if out.qt_probs is None else out.qt_probs.data[0, i],
            ik_pred=None if out.ik_pred is None else float(out.ik_pred.data[0, i]),
            kt_probs=out.kt_probs.data[0, i],
        ))
    losses = {"kt": out.l_kt.item(), "total": out.total.item()}
    if out.l_qt is not None:
        losses["qt"] = out.l_qt.item()
    if out.l_ik is not None:
        losses["ik"] = out.l_ik.item()
    return steps, losses


# ---------------------------------------------------------------------------
# Checkpointing


def save_checkpoint(path: str | Path, params: ModelParams) -> None:
    """Write a versioned archive of the config and every named array."""
    meta = json.dumps({"version": CHECKPOINT_VERSION,
                       "config": params.config.to_dict()})
    arrays = {f"param/{k}": t.data for k, t in params.tensors.items()}
    np.savez(path, __meta__=np.array(meta), **arrays)


def load_checkpoint(path: str | Path) -> ModelParams:
    """Load an archive; any missing, extra, or misshapen array is an error."""
    path = Path(path)
    if not path.exists():
        raise EvaluationError(f"no checkpoint at {path}")
    with np.load(path, allow_pickle=False) as npz:
        if "__meta__" not in npz:
            raise EvaluationError(f"{path}: not a model checkpoint")
        meta = json.loads(str(npz["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise EvaluationError(
                f"{path}: checkpoint version {meta.get('version')} unsupported")
        try:
            cfg = ModelConfig.from_dict(meta["config"])
        except (TypeError, ConfigError) as exc:
            raise EvaluationError(f"{path}: bad config in checkpoint ({exc})") from exc
        expected = param_shapes(cfg)
        tensors = {}
        for name, shape in expected.items():
            key = f"param/{name}"
            if key not in npz:
                raise EvaluationError(f"{path}: missing parameter '{name}'")
            arr = npz[key]
            if arr.shape != shape:
                raise EvaluationError(
                    f"{path}: parameter '{name}' has shape {arr.shape}, expected {shape}")
            tensors[name] = Tensor(arr, requires_grad=True)
        extra = {k for k in npz.files if k.startswith("param/")} - \
            {f"param/{n}" for n in expected}
        if extra:
            raise EvaluationError(f"{path}: unexpected parameters {sorted(extra)}")
    return ModelParams(cfg, tensors)
