"""Dense tensor substrate shared by every other module.

Tensors are plain float64 numpy arrays.  This module adds the pieces numpy
does not give us with the exact semantics we need: a splittable seeded RNG,
top-k with a fixed tie rule, layer norm with its backward pass, Xavier
initialisation, operation counters and a central-difference gradient oracle.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64
LN_EPS = 1e-5


# ---------------------------------------------------------------------------
# randomness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SeededRng:
    """Immutable key for a Philox stream.

    Calling :meth:`generator` always restarts the stream, so functions taking
    a ``SeededRng`` stay pure.  Use :meth:`child` to get independent streams
    for distinct purposes (per head, per batch element, per step...).
    """

    seed: int

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def child(self, label) -> "SeededRng":
        digest = hashlib.blake2b(f"{self.seed}/{label}".encode(), digest_size=8).digest()
        return SeededRng(int.from_bytes(digest, "little"))

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.seed))


def sample_without_replacement(rng: SeededRng, n: int, k: int) -> np.ndarray:
    """``k`` distinct indices drawn uniformly from ``range(n)``, sorted ascending."""
    if k < 0 or n < 0:
        raise ValueError("sample sizes must be non-negative")
    if k > n:
        raise ValueError("sample size exceeds population")
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    idx = rng.generator().choice(n, size=k, replace=False)
    return np.sort(idx).astype(np.int64)


def xavier_init(rng: SeededRng, rows: int, cols: int, gain: float = 1.0) -> np.ndarray:
    """Uniform Xavier/Glorot matrix with bound ``gain * sqrt(6 / (rows + cols))``."""
    if rows < 1 or cols < 1:
        raise ValueError("xavier_init needs rows, cols >= 1")
    if not gain > 0:
        raise ValueError(f"gain must be positive, got {gain}")
    bound = gain * math.sqrt(6.0 / (rows + cols))
    return rng.generator().uniform(-bound, bound, size=(rows, cols)).astype(DTYPE)


# ---------------------------------------------------------------------------
# elementwise / normalisation primitives
# ---------------------------------------------------------------------------


def softmax_rows(t: np.ndarray) -> np.ndarray:
    """Softmax over the last axis (max-shifted)."""
    t = np.asarray(t, dtype=DTYPE)
    if t.ndim == 0 or t.shape[-1] == 0:
        raise ValueError("degenerate softmax axis")
    e = np.exp(t - t.max(axis=-1, keepdims=True))
    e /= e.sum(axis=-1, keepdims=True)
    return e


def softmax_backward(probs: np.ndarray, d_probs: np.ndarray) -> np.ndarray:
    return probs * (d_probs - (d_probs * probs).sum(axis=-1, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=DTYPE)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def swish(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def swish_backward(x: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return d_out * (s + x * s * (1.0 - s))


@dataclass
class LayerNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray


def layer_norm(x, gamma, beta, eps: float = LN_EPS, *, return_cache: bool = False):
    """LayerNorm over the last axis: ``gamma * (x - mean) / sqrt(var + eps) + beta``.

    ``eps=0`` is allowed but a constant slice then raises ``zero variance``.
    """
    x = np.asarray(x, dtype=DTYPE)
    gamma = np.asarray(gamma, dtype=DTYPE)
    beta = np.asarray(beta, dtype=DTYPE)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"gamma/beta must have shape ({d},), got {gamma.shape}, {beta.shape}")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    if eps == 0 and np.any(var == 0):
        raise ValueError("zero variance")
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = xc * inv_std
    y = x_hat * gamma + beta
    if return_cache:
        return y, LayerNormCache(x_hat, inv_std, gamma)
    return y


def layer_norm_backward(cache: LayerNormCache, d_y: np.ndarray):
    """Returns ``(d_x, d_gamma, d_beta)``; parameter grads are summed over leading axes."""
    lead = tuple(range(d_y.ndim - 1))
    d_gamma = (d_y * cache.x_hat).sum(axis=lead)
    d_beta = d_y.sum(axis=lead)
    g = d_y * cache.gamma
    d_x = cache.inv_std * (
        g - g.mean(axis=-1, keepdims=True) - cache.x_hat * (g * cache.x_hat).mean(axis=-1, keepdims=True)
    )
    return d_x, d_gamma, d_beta


def topk_indices(v: Sequence[float], k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries, lower index wins ties, sorted ascending."""
    v = np.asarray(v, dtype=DTYPE)
    if v.ndim != 1:
        raise ValueError("topk_indices expects a vector")
    if k < 0 or k > v.shape[0]:
        raise ValueError(f"k={k} out of range for vector of length {v.shape[0]}")
    order = np.argsort(-v, kind="stable")
    return np.sort(order[:k])


def topk_rows(m: np.ndarray, k: int) -> np.ndarray:
    """Row-wise :func:`topk_indices` over the last axis of ``m``."""
    if k < 0 or k > m.shape[-1]:
        raise ValueError(f"k={k} out of range for axis of length {m.shape[-1]}")
    order = np.argsort(-m, axis=-1, kind="stable")
    return np.sort(order[..., :k], axis=-1)


# ---------------------------------------------------------------------------
# counters
# ---------------------------------------------------------------------------


@dataclass
class OpCounters:
    """Exact multiply-accumulate and live-buffer accounting for attention.

    ``mac_count`` is the sum of the per-kind counts in ``macs``; ``live`` tracks
    currently allocated attention-buffer elements and ``peak_elements`` its max.
    """

    mac_count: int = 0
    peak_elements: int = 0
    live: int = 0
    macs: dict = field(default_factory=dict)

    def add_macs(self, kind: str, n: int) -> None:
        if n < 0:
            raise ValueError("negative MAC count")
        self.macs[kind] = self.macs.get(kind, 0) + int(n)
        self.mac_count += int(n)

    def alloc(self, n: int) -> None:
        self.live += int(n)
        self.peak_elements = max(self.peak_elements, self.live)

    def free(self, n: int) -> None:
        self.live -= int(n)

    @property
    def score_macs(self) -> int:
        return self.macs.get("score", 0)

    def merge(self, other: "OpCounters") -> None:
        """Accumulate a sequential call: MACs add, peaks take the max."""
        for kind, n in other.macs.items():
            self.add_macs(kind, n)
        self.peak_elements = max(self.peak_elements, other.peak_elements)


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of the gradient of scalar ``f`` at ``x``."""
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ValueError(f"non-finite function value near element {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the largest magnitude in either array (0 when both vanish)."""
    analytic = np.asarray(analytic, dtype=DTYPE)
    numeric = np.asarray(numeric, dtype=DTYPE)
    diff = float(np.max(np.abs(analytic - numeric), initial=0.0))
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    if diff == 0.0:
        return 0.0
    return diff / scale


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------


def tensor_to_json(t: np.ndarray) -> dict:
    t = np.asarray(t, dtype=DTYPE)
    return {"shape": list(t.shape), "data": [float(v) for v in t.reshape(-1)]}


def tensor_from_json(obj: dict) -> np.ndarray:
    shape = [int(s) for s in obj["shape"]]
    data = np.asarray(obj["data"], dtype=DTYPE)
    if int(np.prod(shape, dtype=np.int64)) != data.size:
        raise ValueError(f"shape {shape} does not match {data.size} data values")
    return data.reshape(shape)


def dump_tensors(tensors: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump({k: tensor_to_json(v) for k, v in tensors.items()}, fh)


def load_tensors(path) -> dict:
    with open(path) as fh:
        raw = json.load(fh)
    return {k: tensor_from_json(v) for k, v in raw.items()}
