"""ProbSparse multi-head self-attention with relative position terms.

Both the sparse path and the dense baseline score queries against keys as

    S = ((Q + U1) K^T + (Q + U2) P^T) / sqrt(d_head)

where ``P`` is a learned projection of a sinusoidal position table.  The
sparse path only builds score rows for the top-u queries ranked by the
max-mean measure computed against a random key subset; the remaining query
rows keep their own value vectors.  Gradients are hand-derived and cached
intermediates make backward exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .tensor import (
    DTYPE,
    OpCounters,
    SeededRng,
    dump_tensors,
    load_tensors,
    sample_without_replacement,
    softmax_backward,
    softmax_rows,
    topk_rows,
    xavier_init,
)

MASK_FILL = -1e30
MODES = ("sparse", "dense")


@dataclass
class AttentionConfig:
    h: int = 8
    d: int = 512
    c1: float = 5.0
    c2: float = 5.0
    p_dropout: float = 0.0
    mode: str = "sparse"

    def __post_init__(self):
        if self.h < 1 or self.d < 1 or self.d % self.h:
            raise ValueError(f"d={self.d} must be a positive multiple of h={self.h}")
        if not (self.c1 > 0 and self.c2 > 0):
            raise ValueError("c1 and c2 must be positive")
        if not 0.0 <= self.p_dropout < 1.0:
            raise ValueError("p_dropout must lie in [0, 1)")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def d_head(self) -> int:
        return self.d // self.h


@dataclass
class AttentionWeights:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_P: np.ndarray
    W_O: np.ndarray
    U1: np.ndarray
    U2: np.ndarray

    def names(self):
        return [f.name for f in fields(self)]

    def as_dict(self) -> dict:
        return {n: getattr(self, n) for n in self.names()}

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionWeights":
        return cls(**{f.name: np.asarray(d[f.name], dtype=DTYPE) for f in fields(cls)})

    def zeros_like(self) -> "AttentionWeights":
        return AttentionWeights(**{n: np.zeros_like(v) for n, v in self.as_dict().items()})

    def check(self, cfg: AttentionConfig) -> None:
        for n in ("W_Q", "W_K", "W_V", "W_P", "W_O"):
            if getattr(self, n).shape != (cfg.d, cfg.d):
                raise ValueError(f"{n} must be {cfg.d}x{cfg.d}, got {getattr(self, n).shape}")
        for n in ("U1", "U2"):
            if getattr(self, n).shape != (cfg.h, cfg.d_head):
                raise ValueError(f"{n} must have shape ({cfg.h}, {cfg.d_head})")

    @classmethod
    def init(cls, cfg: AttentionConfig, rng: SeededRng, gain: float = 1.0) -> "AttentionWeights":
        mats = {n: xavier_init(rng.child(n), cfg.d, cfg.d, gain) for n in ("W_Q", "W_K", "W_V", "W_P", "W_O")}
        # Transformer-XL style biases start at zero
        zeros = np.zeros((cfg.h, cfg.d_head), dtype=DTYPE)
        return cls(U1=zeros.copy(), U2=zeros.copy(), **mats)


def save_attention_weights(w: AttentionWeights, path, extra: dict | None = None) -> None:
    tensors = w.as_dict()
    tensors.update(extra or {})
    dump_tensors(tensors, path)


def load_attention_weights(path) -> tuple[AttentionWeights, dict]:
    """Returns the weights and any extra named tensors (fixture inputs/outputs)."""
    tensors = load_tensors(path)
    names = {f.name for f in fields(AttentionWeights)}
    missing = names - tensors.keys()
    if missing:
        raise ValueError(f"weight file lacks {sorted(missing)}")
    w = AttentionWeights.from_dict(tensors)
    return w, {k: v for k, v in tensors.items() if k not in names}


@dataclass
class PaddingMask:
    valid_len: np.ndarray

    def __post_init__(self):
        self.valid_len = np.asarray(self.valid_len, dtype=np.int64).reshape(-1)

    @classmethod
    def full(cls, b: int, L: int) -> "PaddingMask":
        return cls(np.full(b, L, dtype=np.int64))

    def check(self, b: int, L_K: int) -> None:
        if self.valid_len.shape != (b,):
            raise ValueError(f"mask has {self.valid_len.shape[0]} entries for batch of {b}")
        if np.any(self.valid_len < 1):
            raise ValueError("no valid keys")
        if np.any(self.valid_len > L_K):
            raise ValueError("valid_len exceeds key length")

    def key_bias(self, L_K: int) -> np.ndarray:
        """Additive bias of shape (b, 1, 1, L_K): 0 on valid keys, MASK_FILL on padding."""
        pad = np.arange(L_K)[None, :] >= self.valid_len[:, None]
        return np.where(pad, MASK_FILL, 0.0)[:, None, None, :]


@dataclass
class SparsitySelection:
    key_sample_idx: list  # per batch element: (h, L'_K) int array
    m_bar: np.ndarray  # (b, h, L_Q)
    top_query_idx: np.ndarray  # (b, h, L'_Q), ascending


@dataclass
class AttentionCache:
    cfg: AttentionConfig
    weights: AttentionWeights
    X: np.ndarray
    Y: np.ndarray
    X_P: np.ndarray
    QU1: np.ndarray  # (b, h, L_Q, dq)
    QU2: np.ndarray
    K: np.ndarray  # (b, h, L_K, dk)
    V: np.ndarray
    P: np.ndarray
    scores: np.ndarray  # pre-softmax, masked, (b, h, u, L_K)
    probs: np.ndarray
    drop: np.ndarray | None  # inverted-dropout multiplier, or None
    merged: np.ndarray  # (b, L_Q, d) input to W_O
    selection: SparsitySelection | None = None


@dataclass
class AttentionGradients:
    X: np.ndarray
    Y: np.ndarray
    X_P: np.ndarray
    weights: AttentionWeights = field(repr=False)


# ---------------------------------------------------------------------------
# pieces
# ---------------------------------------------------------------------------


def sample_budget(c: float, L: int) -> int:
    """``c * ceil(ln L)`` clamped to [1, L]."""
    if L < 1:
        raise ValueError("length must be >= 1")
    return min(L, max(1, int(c * math.ceil(math.log(L)))))


def relpos_encoding(L: int, d: int) -> np.ndarray:
    """Sinusoid table of shape (L, d); row j encodes distance ``L - 1 - j``.

    Columns alternate sin/cos of ``r / 10000**(2i/d)``.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    if d < 2 or d % 2:
        raise ValueError(f"relative position width must be even and >= 2, got {d}")
    r = (L - 1 - np.arange(L, dtype=DTYPE))[:, None]
    freq = 10000.0 ** (-np.arange(0, d, 2, dtype=DTYPE) / d)
    out = np.empty((L, d), dtype=DTYPE)
    out[:, 0::2] = np.sin(r * freq)
    out[:, 1::2] = np.cos(r * freq)
    return out


def _split_heads(t: np.ndarray, h: int) -> np.ndarray:
    b, L, d = t.shape
    return t.reshape(b, L, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(t: np.ndarray) -> np.ndarray:
    b, h, L, dh = t.shape
    return t.transpose(0, 2, 1, 3).reshape(b, L, h * dh)


def _as_batched_pos(X_P: np.ndarray, b: int, L_K: int, d: int) -> np.ndarray:
    X_P = np.asarray(X_P, dtype=DTYPE)
    if X_P.shape == (L_K, d):
        return np.broadcast_to(X_P, (b, L_K, d))
    if X_P.shape == (b, L_K, d):
        return X_P
    raise ValueError(f"X_P must be ({L_K}, {d}) or ({b}, {L_K}, {d}), got {X_P.shape}")


def project(X, Y, X_P, w: AttentionWeights, h: int):
    """Linear projections and head split.

    Returns Q of shape (b, L_Q, h, dq) and K, V, P of shape (b, h, L_K, dk).
    """
    X = np.asarray(X, dtype=DTYPE)
    Y = np.asarray(Y, dtype=DTYPE)
    if X.ndim != 3 or Y.ndim != 3:
        raise ValueError("X and Y must be (b, L, d)")
    b, L_K, d = X.shape
    if Y.shape[0] != b or Y.shape[2] != d:
        raise ValueError(f"Y shape {Y.shape} inconsistent with X shape {X.shape}")
    if d % h:
        raise ValueError(f"width {d} not divisible by {h} heads")
    if w.W_Q.shape != (d, d):
        raise ValueError(f"weights are {w.W_Q.shape}, inputs have width {d}")
    XP = _as_batched_pos(X_P, b, L_K, d)
    L_Q = Y.shape[1]
    Q = (Y @ w.W_Q).reshape(b, L_Q, h, d // h)
    K = _split_heads(X @ w.W_K, h)
    V = _split_heads(X @ w.W_V, h)
    P = _split_heads(XP @ w.W_P, h)
    return Q, K, V, P


def sparsity_measure(QU1: np.ndarray, K_part: np.ndarray, L_K: int) -> np.ndarray:
    """Max-mean query score against a sampled key subset.

    ``max_j(q k_j) - sum_j(q k_j) / L_K`` with j over the sampled keys only and
    unscaled dot products.  Leading axes of both inputs broadcast.
    """
    if K_part.shape[-2] == 0:
        raise ValueError("empty key sample")
    dots = QU1 @ np.swapaxes(K_part, -1, -2)
    return dots.max(axis=-1) - dots.sum(axis=-1) / L_K


def _attend(QU1_sel, QU2_sel, K, P, V, mask: PaddingMask, cfg, rng, training, counters):
    b, h, u, dq = QU1_sel.shape
    L_K = K.shape[2]
    scores = (QU1_sel @ np.swapaxes(K, -1, -2) + QU2_sel @ np.swapaxes(P, -1, -2)) / math.sqrt(dq)
    counters.add_macs("score", 2 * b * h * u * L_K * dq)
    counters.alloc(scores.size)
    scores += mask.key_bias(L_K)
    probs = softmax_rows(scores)
    counters.alloc(probs.size)
    drop = None
    A = probs
    if training and cfg.p_dropout > 0:
        keep = rng.child("dropout").generator().random(probs.shape) >= cfg.p_dropout
        drop = keep / (1.0 - cfg.p_dropout)
        A = probs * drop
        counters.alloc(A.size)
    ctx = A @ V
    counters.add_macs("value", b * h * u * L_K * V.shape[-1])
    counters.alloc(ctx.size)
    return scores, probs, drop, ctx


def _prepare(X, X_P, Y, w, cfg, mask):
    w.check(cfg)
    Q, K, V, P = project(X, Y, X_P, w, cfg.h)
    b, L_Q = Q.shape[:2]
    if L_Q == 0:
        raise ValueError("L_Q must be >= 1")
    mask.check(b, K.shape[2])
    QU1 = (Q + w.U1).transpose(0, 2, 1, 3)
    QU2 = (Q + w.U2).transpose(0, 2, 1, 3)
    return QU1, QU2, K, V, P


def _finish(merged, cache_kwargs, w):
    return merged @ w.W_O, AttentionCache(merged=merged, weights=w, **cache_kwargs)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def select_queries(QU1, K, mask: PaddingMask, cfg: AttentionConfig, rng: SeededRng, counters=None):
    """Key sampling, max-mean scores and top-u query choice per (batch, head)."""
    counters = counters if counters is not None else OpCounters()
    b, h, L_Q, dq = QU1.shape
    L_K = K.shape[2]
    budget_k = sample_budget(cfg.c1, L_K)
    m_bar = np.empty((b, h, L_Q), dtype=DTYPE)
    samples = []
    sampled = 0
    for bi in range(b):
        n_valid = int(mask.valid_len[bi])
        lk = min(budget_k, n_valid)
        idx = np.stack([
            sample_without_replacement(rng.child(("keys", bi, hi)), n_valid, lk) for hi in range(h)
        ])
        samples.append(idx)
        K_part = K[bi, np.arange(h)[:, None], idx]
        m_bar[bi] = sparsity_measure(QU1[bi], K_part, L_K)
        counters.add_macs("measure", h * L_Q * lk * dq)
        sampled += h * L_Q * lk
    counters.alloc(sampled + m_bar.size)
    counters.free(sampled)
    # padded query rows rank last so their content cannot displace valid rows
    pad_q = np.arange(L_Q)[None, None, :] >= mask.valid_len[:, None, None]
    top = topk_rows(np.where(pad_q, -np.inf, m_bar), sample_budget(cfg.c2, L_Q))
    counters.alloc(top.size)
    return SparsitySelection(samples, m_bar, top)


def probsparse_forward(X, X_P, Y, w: AttentionWeights, cfg: AttentionConfig, mask: PaddingMask,
                       rng: SeededRng, training: bool = False):
    """Sparse attention forward.  Returns ``(out, cache, counters)``."""
    if cfg.mode != "sparse":
        raise ValueError("probsparse_forward needs cfg.mode == 'sparse'")
    QU1, QU2, K, V, P = _prepare(X, X_P, Y, w, cfg, mask)
    if QU1.shape[2] != K.shape[2]:
        raise ValueError("sparse attention overwrites value rows by query index and needs L_Q == L_K")
    counters = OpCounters()
    sel = select_queries(QU1, K, mask, cfg, rng, counters)
    gather = sel.top_query_idx[..., None]
    QU1_sel = np.take_along_axis(QU1, gather, axis=2)
    QU2_sel = np.take_along_axis(QU2, gather, axis=2)
    scores, probs, drop, ctx = _attend(QU1_sel, QU2_sel, K, P, V, mask, cfg, rng, training, counters)
    V_new = V.copy()
    np.put_along_axis(V_new, gather, ctx, axis=2)
    out, cache = _finish(
        _merge_heads(V_new),
        dict(cfg=cfg, X=np.asarray(X, DTYPE), Y=np.asarray(Y, DTYPE), X_P=np.asarray(X_P, DTYPE),
             QU1=QU1, QU2=QU2, K=K, V=V, P=P, scores=scores, probs=probs, drop=drop, selection=sel),
        w,
    )
    return out, cache, counters


def dense_forward(X, X_P, Y, w: AttentionWeights, cfg: AttentionConfig, mask: PaddingMask,
                  rng: SeededRng, training: bool = False):
    """Full relative-position attention over every query.  Returns ``(out, cache, counters)``."""
    if cfg.mode != "dense":
        raise ValueError("dense_forward needs cfg.mode == 'dense'")
    QU1, QU2, K, V, P = _prepare(X, X_P, Y, w, cfg, mask)
    counters = OpCounters()
    scores, probs, drop, ctx = _attend(QU1, QU2, K, P, V, mask, cfg, rng, training, counters)
    out, cache = _finish(
        _merge_heads(ctx),
        dict(cfg=cfg, X=np.asarray(X, DTYPE), Y=np.asarray(Y, DTYPE), X_P=np.asarray(X_P, DTYPE),
             QU1=QU1, QU2=QU2, K=K, V=V, P=P, scores=scores, probs=probs, drop=drop),
        w,
    )
    return out, cache, counters


def attention_forward(X, X_P, Y, w, cfg, mask, rng, training=False):
    """Dispatch on ``cfg.mode``."""
    fn = probsparse_forward if cfg.mode == "sparse" else dense_forward
    return fn(X, X_P, Y, w, cfg, mask, rng, training)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def attention_backward(cache: AttentionCache, d_out: np.ndarray) -> AttentionGradients:
    w = cache.weights
    merged = cache.merged
    d_out = np.asarray(d_out, dtype=DTYPE)
    if d_out.shape != merged.shape:
        raise ValueError(f"d_out shape {d_out.shape} != output shape {merged.shape}")
    b, L_Q, d = merged.shape
    h = cache.cfg.h
    dq = d // h
    g = AttentionGradients(X=None, Y=None, X_P=None, weights=w.zeros_like())
    g.weights.W_O = merged.reshape(-1, d).T @ d_out.reshape(-1, d)
    d_vnew = _split_heads(d_out @ w.W_O.T, h)

    if cache.selection is not None:
        gather = cache.selection.top_query_idx[..., None]
        d_ctx = np.take_along_axis(d_vnew, gather, axis=2)
        # unselected rows pass straight through to V
        d_V = d_vnew.copy()
        np.put_along_axis(d_V, gather, 0.0, axis=2)
        QU1_sel = np.take_along_axis(cache.QU1, gather, axis=2)
        QU2_sel = np.take_along_axis(cache.QU2, gather, axis=2)
    else:
        gather = None
        d_ctx = d_vnew
        d_V = np.zeros_like(cache.V)
        QU1_sel, QU2_sel = cache.QU1, cache.QU2

    A = cache.probs if cache.drop is None else cache.probs * cache.drop
    d_V += np.swapaxes(A, -1, -2) @ d_ctx
    d_A = d_ctx @ np.swapaxes(cache.V, -1, -2)
    d_probs = d_A if cache.drop is None else d_A * cache.drop
    d_S = softmax_backward(cache.probs, d_probs) / math.sqrt(dq)

    d_qu1_sel = d_S @ cache.K
    d_qu2_sel = d_S @ cache.P
    d_K = np.swapaxes(d_S, -1, -2) @ QU1_sel
    d_P = np.swapaxes(d_S, -1, -2) @ QU2_sel
    if gather is not None:
        d_qu1 = np.zeros_like(cache.QU1)
        d_qu2 = np.zeros_like(cache.QU2)
        np.put_along_axis(d_qu1, gather, d_qu1_sel, axis=2)
        np.put_along_axis(d_qu2, gather, d_qu2_sel, axis=2)
    else:
        d_qu1, d_qu2 = d_qu1_sel, d_qu2_sel

    g.weights.U1 = d_qu1.sum(axis=(0, 2))
    g.weights.U2 = d_qu2.sum(axis=(0, 2))
    d_Q = _merge_heads(d_qu1 + d_qu2)
    d_Km, d_Vm, d_Pm = _merge_heads(d_K), _merge_heads(d_V), _merge_heads(d_P)

    X, Y = cache.X, cache.Y
    L_K = X.shape[1]
    XP = _as_batched_pos(cache.X_P, b, L_K, d)
    flat = lambda t: t.reshape(-1, d)  # noqa: E731
    g.weights.W_Q = flat(Y).T @ flat(d_Q)
    g.weights.W_K = flat(X).T @ flat(d_Km)
    g.weights.W_V = flat(X).T @ flat(d_Vm)
    g.weights.W_P = flat(XP).T @ flat(d_Pm)
    g.Y = d_Q @ w.W_Q.T
    g.X = d_Km @ w.W_K.T + d_Vm @ w.W_V.T
    d_XP = d_Pm @ w.W_P.T
    g.X_P = d_XP.sum(axis=0) if cache.X_P.ndim == 2 else d_XP
    return g


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------


def flop_estimate(cfg: AttentionConfig, L: int, batch: int = 1, training: bool = False) -> OpCounters:
    """Closed-form counters for one self-attention call on unpadded length ``L``.

    Mirrors the accounting done inside the forward passes exactly.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    b, h, dq = batch, cfg.h, cfg.d_head
    est = OpCounters()
    if cfg.mode == "sparse":
        lk = sample_budget(cfg.c1, L)
        u = sample_budget(cfg.c2, L)
        est.add_macs("measure", b * h * L * lk * dq)
        stage1 = b * h * L * lk + b * h * L
        stage2 = b * h * L + b * h * u
    else:
        u = L
        stage1 = 0
        stage2 = 0
    est.add_macs("score", 2 * b * h * u * L * dq)
    est.add_macs("value", b * h * u * L * dq)
    n_buffers = 3 if training and cfg.p_dropout > 0 else 2
    stage2 += n_buffers * b * h * u * L + b * h * u * dq
    est.peak_elements = max(stage1, stage2)
    return est
