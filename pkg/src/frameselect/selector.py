"""Score-query selector: a small decoder-only transformer with manual backprop.

Input layout for scoring one video/question pair: the n candidate frames
contribute n*m projected visual tokens, followed by the question tokens,
followed by a single learnable score query token, all under causal
attention. The query token's residual-stream state after the penultimate
block (`e_q`) summarizes everything before it; an MLP head maps `e_q` to
one logistic importance score per candidate frame.

The final block is unused by the score head; it exists for the auxiliary
next-token (instruction) task, which reads the full stack through a final
layer norm and a tied-embedding head.

Everything is plain NumPy. Forward passes cache the intermediates needed
for a hand-written reverse pass; gradients are produced only for the
trainable leaves (alignment projector, score query, score head, optional
low-rank adapters) because the backbone is frozen in every training stage.

Shapes: (B, S, d) = batch, sequence, model width; (B, h, S, dh) per-head.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DomainError, TrainingError
from .frames import TokenGrid
from .tokenizer import QuestionTokens

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


# -------------------------- configuration --------------------------


@dataclass(frozen=True)
class SelectorConfig:
    """Architecture hyperparameters for the selector."""

    d: int = 64            # model width
    n_blocks: int = 2      # transformer blocks; >= 2 so a penultimate block exists
    heads: int = 4
    m: int = 9             # pooled visual tokens per frame (g*g)
    n_max: int = 32        # maximum candidate frames (score head width)
    vocab: int = 512       # hashing-tokenizer bucket count
    d_v: int = 16          # raw visual feature dimension
    l_max: int = 32        # question tokens kept
    r_max: int = 16        # response tokens kept (instruction task)
    score_hidden: int = 128

    def __post_init__(self) -> None:
        if self.d < 1 or self.d % self.heads != 0:
            raise ConfigError(f"width {self.d} must be divisible by heads {self.heads}")
        if self.n_blocks < 2:
            raise ConfigError("need at least 2 blocks so a penultimate block exists")
        if self.m < 1:
            raise ConfigError(f"tokens per frame must be >= 1, got {self.m}")
        if min(self.n_max, self.vocab, self.d_v, self.l_max, self.r_max) < 1:
            raise ConfigError("all size fields must be positive")
        if self.vocab < 2:
            raise ConfigError("vocab must be >= 2 (id 0 is the pad bucket)")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def max_seq(self) -> int:
        return self.n_max * self.m + self.l_max + 1 + self.r_max

    def to_dict(self) -> dict:
        return {
            "d": self.d, "n_blocks": self.n_blocks, "heads": self.heads,
            "m": self.m, "n_max": self.n_max, "vocab": self.vocab,
            "d_v": self.d_v, "l_max": self.l_max, "r_max": self.r_max,
            "score_hidden": self.score_hidden,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "SelectorConfig":
        unknown = set(data) - {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        if unknown:
            raise ConfigError(f"unknown selector config keys: {sorted(unknown)}")
        return cls(**data)


STAGE1_TRAINABLE = (
    "proj_w", "proj_b", "score_query",
    "score_w1", "score_b1", "score_w2", "score_b2",
)


def lora_names(config: SelectorConfig) -> tuple[str, ...]:
    names: list[str] = []
    for i in range(config.n_blocks):
        names += [f"blk{i}_lora_a", f"blk{i}_lora_b"]
    return tuple(names)


def select_trainables(stage: int, config: SelectorConfig) -> tuple[str, ...]:
    """Named trainable leaves per training stage; everything else is frozen."""
    if stage == 1:
        return STAGE1_TRAINABLE
    if stage == 2:
        return STAGE1_TRAINABLE + lora_names(config)
    raise DomainError(f"stage must be 1 or 2, got {stage}")


# -------------------------- parameters --------------------------


def init_params(
    config: SelectorConfig,
    seed: int = 0,
    zero_score_out: bool = False,
    dtype=np.float64,
) -> dict[str, np.ndarray]:
    """Fresh parameter set.

    zero_score_out zeroes the score head's final layer so the untrained
    selector emits exactly 0.5 per frame; the default random init is
    preferred for training since a zero layer passes no gradient upstream.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF5]))
    d, dv, hid = config.d, config.d_v, config.score_hidden

    def norm(*shape, scale):
        return (rng.standard_normal(shape) * scale).astype(dtype)

    p: dict[str, np.ndarray] = {
        "embed": norm(config.vocab, d, scale=0.02),
        "pos": norm(config.max_seq, d, scale=0.02),
        "proj_w": norm(dv, d, scale=1.0 / math.sqrt(dv)),
        "proj_b": np.zeros(d, dtype=dtype),
        "score_query": norm(d, scale=0.02),
        "score_w1": norm(d, hid, scale=1.0 / math.sqrt(d)),
        "score_b1": np.zeros(hid, dtype=dtype),
        "score_w2": np.zeros((hid, config.n_max), dtype=dtype)
        if zero_score_out else norm(hid, config.n_max, scale=1.0 / math.sqrt(hid)),
        "score_b2": np.zeros(config.n_max, dtype=dtype),
        "lnf_g": np.ones(d, dtype=dtype),
        "lnf_b": np.zeros(d, dtype=dtype),
    }
    for i in range(config.n_blocks):
        s = 1.0 / math.sqrt(d)
        p[f"blk{i}_ln1_g"] = np.ones(d, dtype=dtype)
        p[f"blk{i}_ln1_b"] = np.zeros(d, dtype=dtype)
        p[f"blk{i}_wq"] = norm(d, d, scale=s)
        p[f"blk{i}_wk"] = norm(d, d, scale=s)
        p[f"blk{i}_wv"] = norm(d, d, scale=s)
        p[f"blk{i}_wo"] = norm(d, d, scale=s / math.sqrt(2 * config.n_blocks))
        p[f"blk{i}_ln2_g"] = np.ones(d, dtype=dtype)
        p[f"blk{i}_ln2_b"] = np.zeros(d, dtype=dtype)
        p[f"blk{i}_mlp_w1"] = norm(d, 4 * d, scale=s)
        p[f"blk{i}_mlp_b1"] = np.zeros(4 * d, dtype=dtype)
        p[f"blk{i}_mlp_w2"] = norm(4 * d, d, scale=1.0 / math.sqrt(4 * d) / math.sqrt(2 * config.n_blocks))
        p[f"blk{i}_mlp_b2"] = np.zeros(d, dtype=dtype)
    return p


@dataclass
class LoraAdapters:
    """Per-block low-rank deltas applied to each block's attention output
    projection: y += (alpha/rank) * (x @ A) @ B. B starts at zero, so a
    fresh adapter set leaves the network exactly unchanged."""

    rank: int
    alpha: float
    tensors: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ConfigError(f"lora rank must be >= 1, got {self.rank}")
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t)):
                raise ConfigError(f"adapter tensor {name} has non-finite values")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def pair(self, block: int) -> tuple[np.ndarray, np.ndarray]:
        return self.tensors[f"blk{block}_lora_a"], self.tensors[f"blk{block}_lora_b"]


def init_lora(
    config: SelectorConfig,
    rank: int = 4,
    alpha: float = 8.0,
    seed: int = 0,
    dtype=np.float64,
) -> LoraAdapters:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x10AA]))
    tensors: dict[str, np.ndarray] = {}
    for i in range(config.n_blocks):
        tensors[f"blk{i}_lora_a"] = (
            rng.standard_normal((config.d, rank)) / math.sqrt(config.d)
        ).astype(dtype)
        tensors[f"blk{i}_lora_b"] = np.zeros((rank, config.d), dtype=dtype)
    return LoraAdapters(rank=rank, alpha=alpha, tensors=tensors)


def tensor_fingerprint(tensors: Mapping[str, np.ndarray]) -> str:
    """Order-independent sha256 over tensor names and exact bytes."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensors[name]).tobytes())
    return h.hexdigest()


# -------------------------- primitives --------------------------


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy from logits; returns (loss, dloss/dlogits).

    Uses softplus(z) - z*t, which equals -[t ln s + (1-t) ln(1-s)] for
    s = sigmoid(z) without ever forming log(0).
    """
    if logits.shape != targets.shape:
        raise DomainError(f"logits {logits.shape} vs targets {targets.shape}")
    loss = float(np.mean(np.logaddexp(0.0, logits) - logits * targets))
    dz = (sigmoid(logits) - targets) / logits.size
    return loss, dz


def softmax_xent(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over all positions; returns (loss, dloss/dlogits)."""
    zmax = logits.max(axis=-1, keepdims=True)
    ez = np.exp(logits - zmax)
    z_sum = ez.sum(axis=-1, keepdims=True)
    logp = (logits - zmax) - np.log(z_sum)
    flat_lp = logp.reshape(-1, logp.shape[-1])
    flat_t = targets.reshape(-1)
    loss = float(-flat_lp[np.arange(flat_t.size), flat_t].mean())
    dz = ez / z_sum
    flat_dz = dz.reshape(-1, dz.shape[-1])
    flat_dz[np.arange(flat_t.size), flat_t] -= 1.0
    dz /= flat_t.size
    return loss, dz


def _layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv, g)


def _layer_norm_bwd_x(dy, cache):
    # Input gradient only; gamma/beta are frozen backbone parameters.
    xhat, inv, g = cache
    gh = dy * g
    m1 = gh.mean(axis=-1, keepdims=True)
    m2 = (gh * xhat).mean(axis=-1, keepdims=True)
    return (gh - m1 - xhat * m2) * inv


def _gelu(u):
    inner = _GELU_C * (u + _GELU_A * u ** 3)
    t = np.tanh(inner)
    return 0.5 * u * (1.0 + t), (u, t)


def _gelu_bwd(dy, cache):
    u, t = cache
    dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * u ** 2)
    return dy * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t ** 2) * dinner)


def causal_mask(s: int, dtype=np.float64) -> np.ndarray:
    """(s, s) additive mask: 0 at and below the diagonal, -inf above."""
    return np.where(np.triu(np.ones((s, s), dtype=bool), k=1), -np.inf, 0.0).astype(dtype)


def _split_heads(x, heads):
    b, s, d = x.shape
    return x.reshape(b, s, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * dh)


def _softmax_last(x):
    zmax = x.max(axis=-1, keepdims=True)
    e = np.exp(x - zmax)
    return e / e.sum(axis=-1, keepdims=True)


def _attention(x, wq, wk, wv, wo, heads, mask, lora=None):
    """Causal multi-head self-attention with an optional low-rank delta on
    the output projection. Returns (y, cache)."""
    scale = 1.0 / math.sqrt(x.shape[-1] // heads)
    q = _split_heads(x @ wq, heads)
    k = _split_heads(x @ wk, heads)
    v = _split_heads(x @ wv, heads)
    logits = q @ k.transpose(0, 1, 3, 2) * scale + mask
    p = _softmax_last(logits)
    merged = _merge_heads(p @ v)
    y = merged @ wo
    inner = None
    if lora is not None:
        a_mat, b_mat, lscale = lora
        inner = merged @ a_mat
        y = y + lscale * (inner @ b_mat)
    return y, (x, q, k, v, p, merged, inner, scale)


def _attention_bwd(dy, cache, wq, wk, wv, wo, lora=None):
    """Gradient w.r.t. the attention input, plus adapter gradients when a
    low-rank delta is attached. Backbone weight gradients are not formed."""
    x, q, k, v, p, merged, inner, scale = cache
    b, s, d = x.shape
    dmerged = dy @ wo.T
    da = db = None
    if lora is not None:
        a_mat, b_mat, lscale = lora
        dyf = dy.reshape(-1, d)
        dinner = lscale * (dy @ b_mat.T)
        db = lscale * (inner.reshape(-1, inner.shape[-1]).T @ dyf)
        da = merged.reshape(-1, d).T @ dinner.reshape(-1, dinner.shape[-1])
        dmerged = dmerged + dinner @ a_mat.T
    heads = q.shape[1]
    dctx = _split_heads(dmerged, heads)
    dp = dctx @ v.transpose(0, 1, 3, 2)
    dv = p.transpose(0, 1, 3, 2) @ dctx
    dlogits = (dp - (dp * p).sum(axis=-1, keepdims=True)) * p
    dq = dlogits @ k * scale
    dk = dlogits.transpose(0, 1, 3, 2) @ q * scale
    dx = _merge_heads(dq) @ wq.T + _merge_heads(dk) @ wk.T + _merge_heads(dv) @ wv.T
    return dx, da, db


def _block_forward(x, params, i, heads, mask, adapters):
    lora = None
    if adapters is not None:
        a_mat, b_mat = adapters.pair(i)
        lora = (a_mat, b_mat, adapters.scaling)
    h1, c_ln1 = _layer_norm(x, params[f"blk{i}_ln1_g"], params[f"blk{i}_ln1_b"])
    att, c_att = _attention(
        h1, params[f"blk{i}_wq"], params[f"blk{i}_wk"],
        params[f"blk{i}_wv"], params[f"blk{i}_wo"], heads, mask, lora,
    )
    x1 = x + att
    h2, c_ln2 = _layer_norm(x1, params[f"blk{i}_ln2_g"], params[f"blk{i}_ln2_b"])
    u = h2 @ params[f"blk{i}_mlp_w1"] + params[f"blk{i}_mlp_b1"]
    a, c_g = _gelu(u)
    x2 = x1 + a @ params[f"blk{i}_mlp_w2"] + params[f"blk{i}_mlp_b2"]
    return x2, (i, c_ln1, c_att, c_ln2, c_g, a)


def _block_backward(dx2, cache, params, adapters, grads):
    i, c_ln1, c_att, c_ln2, c_g, a = cache
    # MLP branch
    da = dx2 @ params[f"blk{i}_mlp_w2"].T
    du = _gelu_bwd(da, c_g)
    dh2 = du @ params[f"blk{i}_mlp_w1"].T
    dx1 = dx2 + _layer_norm_bwd_x(dh2, c_ln2)
    # attention branch
    lora = None
    if adapters is not None:
        a_mat, b_mat = adapters.pair(i)
        lora = (a_mat, b_mat, adapters.scaling)
    datt = dx1
    dh1, d_la, d_lb = _attention_bwd(
        datt, c_att, params[f"blk{i}_wq"], params[f"blk{i}_wk"],
        params[f"blk{i}_wv"], params[f"blk{i}_wo"], lora,
    )
    if d_la is not None:
        grads[f"blk{i}_lora_a"] = grads.get(f"blk{i}_lora_a", 0) + d_la
        grads[f"blk{i}_lora_b"] = grads.get(f"blk{i}_lora_b", 0) + d_lb
    return dx1 + _layer_norm_bwd_x(dh1, c_ln1)


def run_blocks(
    params: Mapping[str, np.ndarray],
    config: SelectorConfig,
    x: np.ndarray,
    adapters: LoraAdapters | None = None,
    num_blocks: int | None = None,
    collect: bool = False,
):
    """Run the first `num_blocks` transformer blocks (default: all) over a
    pre-embedded sequence. Returns (hidden, caches)."""
    count = config.n_blocks if num_blocks is None else num_blocks
    mask = causal_mask(x.shape[1], dtype=x.dtype)
    caches = []
    h = x
    for i in range(count):
        h, c = _block_forward(h, params, i, config.heads, mask, adapters)
        if collect:
            caches.append(c)
    return h, caches


# -------------------------- sequence assembly --------------------------


def _embed_sequence(params, config, vis, qids, resp_ids=None):
    """Build the embedded input sequence.

    vis: (B, n, m, d_v) visual features; qids: (B, l) question token ids.
    With resp_ids=None the sequence ends in the score query token;
    otherwise it ends in the embedded response tokens (instruction task).
    """
    b, n, m, dv = vis.shape
    if m != config.m:
        raise DomainError(f"frames carry {m} tokens each, config expects {config.m}")
    if dv != config.d_v:
        raise DomainError(f"visual feature dim {dv}, config expects {config.d_v}")
    if n > config.n_max:
        raise DomainError(f"{n} frames exceed n_max={config.n_max}")
    if not 1 <= qids.shape[1] <= config.l_max:
        raise DomainError(
            f"question length {qids.shape[1]} outside [1, l_max={config.l_max}]"
        )
    if qids.min() < 0 or qids.max() >= config.vocab:
        raise DomainError("question token id out of vocab range")
    dtype = params["proj_w"].dtype
    flat = np.ascontiguousarray(vis.reshape(b, n * m, dv), dtype=dtype)
    vtok = flat @ params["proj_w"] + params["proj_b"]
    qtok = params["embed"][qids]
    if resp_ids is None:
        tail = np.broadcast_to(params["score_query"], (b, 1, config.d))
    else:
        if resp_ids.shape[1] > config.r_max:
            raise DomainError(f"response length {resp_ids.shape[1]} exceeds r_max={config.r_max}")
        tail = params["embed"][resp_ids]
    x = np.concatenate([vtok, qtok, tail], axis=1)
    if x.shape[1] > params["pos"].shape[0]:
        raise DomainError(
            f"sequence length {x.shape[1]} exceeds positional table "
            f"({params['pos'].shape[0]} slots)"
        )
    x = x + params["pos"][: x.shape[1]]
    return x, flat


def _assembly_bwd(dx, flat, n_vis, has_score_query, grads):
    b, s, d = dx.shape
    dv_tok = dx[:, :n_vis, :]
    grads["proj_w"] = flat.reshape(-1, flat.shape[-1]).T @ dv_tok.reshape(-1, d)
    grads["proj_b"] = dv_tok.sum(axis=(0, 1))
    if has_score_query:
        grads["score_query"] = dx[:, -1, :].sum(axis=0)


# -------------------------- score task --------------------------


@dataclass
class _ScoreState:
    """Batched internals of one scoring forward pass."""

    vis: np.ndarray
    qids: np.ndarray
    n: int
    flat: np.ndarray
    penult: np.ndarray           # (B, S, d) residual after the penultimate block
    block_caches: list
    e_query: np.ndarray          # (B, d)
    head_cache: tuple
    logits_full: np.ndarray      # (B, n_max)
    scores: np.ndarray           # (B, n)


def score_forward_batch(
    params: Mapping[str, np.ndarray],
    config: SelectorConfig,
    vis: np.ndarray,
    qids: np.ndarray,
    adapters: LoraAdapters | None = None,
    want_cache: bool = False,
) -> _ScoreState:
    x, flat = _embed_sequence(params, config, vis, qids, resp_ids=None)
    h, caches = run_blocks(
        params, config, x, adapters, num_blocks=config.n_blocks - 1, collect=want_cache
    )
    e_q = h[:, -1, :]
    z1 = e_q @ params["score_w1"] + params["score_b1"]
    a1, c_g = _gelu(z1)
    logits = a1 @ params["score_w2"] + params["score_b2"]
    n = vis.shape[1]
    scores = sigmoid(logits[:, :n])
    return _ScoreState(
        vis=vis, qids=qids, n=n, flat=flat, penult=h,
        block_caches=caches, e_query=e_q,
        head_cache=(e_q, c_g, a1), logits_full=logits, scores=scores,
    )


def score_backward_batch(
    state: _ScoreState,
    params: Mapping[str, np.ndarray],
    config: SelectorConfig,
    targets: np.ndarray,
    adapters: LoraAdapters | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """BCE loss against per-frame targets plus gradients for the trainable
    leaves. The forward pass must have been run with want_cache=True."""
    if not state.block_caches:
        raise DomainError("forward pass was not run with want_cache=True")
    b, n = state.scores.shape
    if targets.shape != (b, n):
        raise DomainError(f"targets shape {targets.shape}, expected {(b, n)}")
    loss, dz_n = bce_with_logits(state.logits_full[:, :n], targets)
    if not math.isfinite(loss):
        raise TrainingError(
            f"non-finite score loss {loss}; logit range "
            f"[{state.logits_full.min()}, {state.logits_full.max()}]"
        )
    grads: dict[str, np.ndarray] = {}
    dz = np.zeros_like(state.logits_full)
    dz[:, :n] = dz_n
    e_q, c_g, a1 = state.head_cache
    grads["score_w2"] = a1.T @ dz
    grads["score_b2"] = dz.sum(axis=0)
    da1 = dz @ params["score_w2"].T
    dz1 = _gelu_bwd(da1, c_g)
    grads["score_w1"] = e_q.T @ dz1
    grads["score_b1"] = dz1.sum(axis=0)
    de_q = dz1 @ params["score_w1"].T
    dh = np.zeros_like(state.penult)
    dh[:, -1, :] = de_q
    for cache in reversed(state.block_caches):
        dh = _block_backward(dh, cache, params, adapters, grads)
    _assembly_bwd(dh, state.flat, state.vis.shape[1] * config.m, True, grads)
    if adapters is not None:
        # Blocks the score path never reaches still expose their adapters as
        # trainable leaves; their gradient is exactly zero.
        for name in lora_names(config):
            if name not in grads:
                grads[name] = np.zeros_like(adapters.tensors[name])
    return loss, grads


@dataclass
class ForwardTrace:
    """Public view of one scoring forward pass (single example)."""

    scores: np.ndarray           # (n,) logistic importance scores
    logits: np.ndarray           # (n_max,) pre-logistic score head output
    frame_states: np.ndarray     # (n, d) mean penultimate state per frame
    question_state: np.ndarray   # (d,) mean penultimate state over the question
    query_state: np.ndarray      # (d,) penultimate state of the score query
    n: int
    state: _ScoreState | None = field(default=None, repr=False)


def _stack_frames(frames: Sequence[TokenGrid], config: SelectorConfig) -> np.ndarray:
    if not frames:
        raise DomainError("need at least one frame")
    g0, dv0 = frames[0].g, frames[0].d_v
    for f in frames:
        if f.g != g0 or f.d_v != dv0:
            raise DomainError("all frames must share grid side and feature dim")
    vis = np.stack([f.tokens() for f in frames])  # (n, m, d_v)
    return vis[None, ...]


def forward(
    params: Mapping[str, np.ndarray],
    config: SelectorConfig,
    frames: Sequence[TokenGrid],
    question: QuestionTokens,
    adapters: LoraAdapters | None = None,
    want_cache: bool = False,
) -> ForwardTrace:
    """Score n candidate frames against a question.

    Returns a trace whose `scores` hold one value in (0, 1) per frame, read
    from the score head applied to the query token's penultimate-block
    state. Pass want_cache=True if the trace will be fed to backward().
    """
    vis = _stack_frames(frames, config)
    qids = np.asarray(question.ids, dtype=np.int64)[None, :]
    if qids.shape[1] > config.l_max:
        qids = qids[:, : config.l_max]
    state = score_forward_batch(params, config, vis, qids, adapters, want_cache)
    n, m, l = state.n, config.m, qids.shape[1]
    per_frame = state.penult[0, : n * m, :].reshape(n, m, -1).mean(axis=1)
    q_state = state.penult[0, n * m : n * m + l, :].mean(axis=0)
    return ForwardTrace(
        scores=state.scores[0],
        logits=state.logits_full[0],
        frame_states=per_frame,
        question_state=q_state,
        query_state=state.e_query[0],
        n=n,
        state=state,
    )


@dataclass(frozen=True)
class BackwardResult:
    loss: float
    grads: dict[str, np.ndarray]


def backward(
    trace: ForwardTrace,
    params: Mapping[str, np.ndarray],
    config: SelectorConfig,
    target: Sequence[float] | np.ndarray,
    loss_kind: str = "bce",
    adapters: LoraAdapters | None = None,
) -> BackwardResult:
    """Gradients of the score loss for every trainable leaf."""
    if loss_kind != "bce":
        raise DomainError(f"unsupported loss kind {loss_kind!r}")
    if trace.state is None:
        raise DomainError("trace was produced without want_cache=True")
    t = np.asarray(target, dtype=trace.scores.dtype)
    if t.shape != (trace.n,):
        raise DomainError(f"target length {t.shape}, expected ({trace.n},)")
    loss, grads = score_backward_batch(
        trace.state, params, config, t[None, :], adapters
    )
    return BackwardResult(loss=loss, grads=grads)


# -------------------------- instruction task --------------------------


@dataclass
class _LmState:
    vis: np.ndarray
    qids: np.ndarray
    resp_ids: np.ndarray
    flat: np.ndarray
    seq_len: int
    pred_start: int              # first sequence position whose output is scored
    block_caches: list
    lnf_cache: tuple
    hf: np.ndarray               # (B, r, d) normed states feeding the tied head
    logits: np.ndarray           # (B, r, vocab)


def lm_forward_batch(
    params: Mapping[str, np.ndarray],
    config: SelectorConfig,
    vis: np.ndarray,
    qids: np.ndarray,
    resp_ids: np.ndarray,
    adapters: LoraAdapters | None = None,
    want_cache: bool = False,
) -> _LmState:
    """Next-token forward for the instruction task.

    The sequence is [visual tokens, question tokens, response tokens]; the
    positions from the last question token through the second-to-last
    response token predict each response token through a tied-embedding
    head on the final block's normed output.
    """
    if resp_ids.shape[1] < 1:
        raise DomainError("response must contain at least one token")
    x, flat = _embed_sequence(params, config, vis, qids, resp_ids=resp_ids)
    h, caches = run_blocks(params, config, x, adapters, collect=want_cache)
    n_vis = vis.shape[1] * config.m
    r = resp_ids.shape[1]
    start = n_vis + qids.shape[1] - 1
    h_slice = h[:, start : start + r, :]
    hf, lnf_cache = _layer_norm(h_slice, params["lnf_g"], params["lnf_b"])
    logits = hf @ params["embed"].T
    return _LmState(
        vis=vis, qids=qids, resp_ids=resp_ids, flat=flat,
        seq_len=x.shape[1], pred_start=start, block_caches=caches,
        lnf_cache=lnf_cache, hf=hf, logits=logits,
    )


def lm_backward_batch(
    state: _LmState,
    params: Mapping[str, np.ndarray],
    config: SelectorConfig,
    adapters: LoraAdapters | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Cross-entropy of the response tokens plus trainable-leaf gradients."""
    if not state.block_caches:
        raise DomainError("forward pass was not run with want_cache=True")
    loss, dlogits = softmax_xent(state.logits, state.resp_ids)
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite instruction loss {loss}")
    grads: dict[str, np.ndarray] = {}
    dhf = dlogits @ params["embed"]
    dh_slice = _layer_norm_bwd_x(dhf, state.lnf_cache)
    b = state.vis.shape[0]
    dh = np.zeros((b, state.seq_len, config.d), dtype=dh_slice.dtype)
    r = state.resp_ids.shape[1]
    dh[:, state.pred_start : state.pred_start + r, :] = dh_slice
    for cache in reversed(state.block_caches):
        dh = _block_backward(dh, cache, params, adapters, grads)
    _assembly_bwd(dh, state.flat, state.vis.shape[1] * config.m, False, grads)
    return loss, grads
