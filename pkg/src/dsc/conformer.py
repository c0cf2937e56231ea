"""Deep sparse Conformer blocks and encoder stacks, forward and backward.

One block applies four residual stages in order: half-step FFN, relative
position self-attention (sparse or dense), convolution module, half-step FFN.
With the DeepNorm style every stage is ``LayerNorm(alpha * x + f(x))``;
``plain_postln`` is the same with ``alpha = 1``; ``original`` keeps plain
residuals and a single LayerNorm at the end of the block.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import Iterator

import numpy as np

from .attention import (
    AttentionConfig,
    AttentionWeights,
    PaddingMask,
    attention_backward,
    attention_forward,
    relpos_encoding,
)
from .tensor import (
    DTYPE,
    SeededRng,
    LN_EPS,
    layer_norm,
    layer_norm_backward,
    sigmoid,
    swish,
    swish_backward,
    tensor_from_json,
    tensor_to_json,
    xavier_init,
)

log = logging.getLogger("dsc.trace")

NORM_STYLES = ("deepnorm_postln_mixture", "plain_postln", "original")
STAGES = ("ffn1", "mhsa", "conv", "ffn2")


# ---------------------------------------------------------------------------
# DeepNorm scalars
# ---------------------------------------------------------------------------


def _check_depths(N: int, M: int) -> None:
    if N < 1 or M < 1:
        raise ValueError(f"encoder/decoder depths must be >= 1, got N={N}, M={M}")


def deepnorm_alpha(N: int, M: int) -> float:
    """Residual scale ``0.81 * (N^4 M)^(1/16)``."""
    _check_depths(N, M)
    return 0.81 * (N**4 * M) ** (1 / 16)


def deepnorm_beta(N: int, M: int) -> float:
    """Initialisation gain ``0.87 * (N^4 M)^(-1/16)``."""
    _check_depths(N, M)
    return 0.87 * (N**4 * M) ** (-1 / 16)


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass
class DeepNormParams:
    alpha: float
    beta: float
    N: int
    M: int

    @classmethod
    def for_depth(cls, N: int, M: int) -> "DeepNormParams":
        return cls(deepnorm_alpha(N, M), deepnorm_beta(N, M), N, M)


@dataclass
class LNParams:
    gamma: np.ndarray
    beta: np.ndarray

    @classmethod
    def identity(cls, d: int) -> "LNParams":
        return cls(np.ones(d, dtype=DTYPE), np.zeros(d, dtype=DTYPE))


@dataclass
class FFNParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray


@dataclass
class ConvParams:
    W_in: np.ndarray  # (d, 2d) pointwise, feeds the GLU
    b_in: np.ndarray
    depthwise: np.ndarray  # (k, d)
    b_dw: np.ndarray
    norm: LNParams
    W_out: np.ndarray  # (d, d)
    b_out: np.ndarray


@dataclass
class BlockParams:
    ffn1: FFNParams
    attn: AttentionWeights
    conv: ConvParams
    ffn2: FFNParams
    ln1: LNParams
    ln2: LNParams
    ln3: LNParams
    ln4: LNParams
    deepnorm: DeepNormParams
    pre_ln: LNParams | None = None  # encoder input LayerNorm, first block only


def named_arrays(tree, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
    """Depth-first ``(dotted name, array)`` pairs of trainable arrays."""
    for f in fields(tree):
        v = getattr(tree, f.name)
        name = f"{prefix}{f.name}"
        if v is None or isinstance(v, DeepNormParams):
            continue
        if is_dataclass(v):
            yield from named_arrays(v, name + ".")
        else:
            yield name, v


def zeros_like_tree(tree):
    """Same structure, zero arrays; DeepNorm scalars are copied as is."""
    kwargs = {}
    for f in fields(tree):
        v = getattr(tree, f.name)
        if v is None or isinstance(v, DeepNormParams):
            kwargs[f.name] = v
        elif is_dataclass(v):
            kwargs[f.name] = zeros_like_tree(v)
        else:
            kwargs[f.name] = np.zeros_like(v)
    return type(tree)(**kwargs)


def get_path(tree, path: str):
    for part in path.split("."):
        tree = getattr(tree, part)
    return tree


def set_path(tree, path: str, value) -> None:
    *head, last = path.split(".")
    for part in head:
        tree = getattr(tree, part)
    setattr(tree, last, value)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


@dataclass
class EncoderConfig:
    n_blocks: int = 12
    d: int = 512
    d_ffn: int = 2048
    h: int = 8
    kernel: int = 31
    c1: float = 5.0
    c2: float = 5.0
    p_dropout: float = 0.0
    mode: str = "sparse"
    norm_style: str = "deepnorm_postln_mixture"
    n_decoder_blocks: int = 3
    ln_eps: float = LN_EPS

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("need at least one block")
        if self.d_ffn < self.d:
            raise ValueError("d_ffn must be >= d")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"depthwise kernel must be odd, got {self.kernel}")
        if self.norm_style not in NORM_STYLES:
            raise ValueError(f"norm_style must be one of {NORM_STYLES}")
        self.attention_config()  # validates h, d, c1, c2, dropout, mode

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(h=self.h, d=self.d, c1=self.c1, c2=self.c2, p_dropout=self.p_dropout, mode=self.mode)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown encoder config fields: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# sub-layers
# ---------------------------------------------------------------------------


def macaron_ffn(x: np.ndarray, p: FFNParams, *, return_cache: bool = False):
    """``swish(x W1 + b1) W2 + b2``; the half-step factor is applied by the block."""
    if x.shape[-1] != p.W1.shape[0] or p.W1.shape[1] != p.W2.shape[0]:
        raise ValueError("FFN shape mismatch")
    a = x @ p.W1 + p.b1
    s = swish(a)
    out = s @ p.W2 + p.b2
    if return_cache:
        return out, (x, a, s, p)
    return out


def ffn_backward(cache, d_out):
    x, a, s, p = cache
    d = x.shape[-1]
    g = FFNParams(
        W1=None, b1=None,
        W2=s.reshape(-1, s.shape[-1]).T @ d_out.reshape(-1, d),
        b2=d_out.reshape(-1, d).sum(axis=0),
    )
    d_a = swish_backward(a, d_out @ p.W2.T)
    g.W1 = x.reshape(-1, d).T @ d_a.reshape(-1, d_a.shape[-1])
    g.b1 = d_a.reshape(-1, d_a.shape[-1]).sum(axis=0)
    return d_a @ p.W1.T, g


@dataclass
class _ConvCache:
    x: np.ndarray
    val: np.ndarray
    sg: np.ndarray
    keep: np.ndarray
    padded: np.ndarray
    ln: object
    n: np.ndarray
    s: np.ndarray
    p: ConvParams


def conv_module(x: np.ndarray, p: ConvParams, valid_len=None, *, eps: float = LN_EPS, return_cache: bool = False):
    """Pointwise -> GLU -> depthwise (same padding) -> LayerNorm -> swish -> pointwise.

    Frames at or beyond ``valid_len`` are zeroed before the depthwise
    convolution so padding never leaks into valid frames.
    """
    b, L, d = x.shape
    k = p.depthwise.shape[0]
    if k % 2 == 0:
        raise ValueError(f"depthwise kernel must be odd, got {k}")
    if p.W_in.shape != (d, 2 * d) or p.depthwise.shape[1] != d:
        raise ValueError("conv module shape mismatch")
    valid_len = np.full(b, L) if valid_len is None else np.asarray(valid_len)
    keep = (np.arange(L)[None, :] < valid_len[:, None]).astype(DTYPE)[..., None]

    a = x @ p.W_in + p.b_in
    val, gate = a[..., :d], a[..., d:]
    sg = sigmoid(gate)
    half = (k - 1) // 2
    padded = np.pad(val * sg * keep, ((0, 0), (half, half), (0, 0)))
    z = np.broadcast_to(p.b_dw, (b, L, d)).copy()
    for j in range(k):
        z += p.depthwise[j] * padded[:, j:j + L]
    n, ln_cache = layer_norm(z, p.norm.gamma, p.norm.beta, eps, return_cache=True)
    s = swish(n)
    out = s @ p.W_out + p.b_out
    if return_cache:
        return out, _ConvCache(x, val, sg, keep, padded, ln_cache, n, s, p)
    return out


def conv_backward(c: _ConvCache, d_out):
    p = c.p
    b, L, d = c.x.shape
    k = p.depthwise.shape[0]
    half = (k - 1) // 2
    flat = lambda t: t.reshape(-1, t.shape[-1])  # noqa: E731
    g = zeros_like_tree(p)
    g.W_out = flat(c.s).T @ flat(d_out)
    g.b_out = flat(d_out).sum(axis=0)
    d_n = swish_backward(c.n, d_out @ p.W_out.T)
    d_z, g.norm.gamma, g.norm.beta = layer_norm_backward(c.ln, d_n)
    g.b_dw = flat(d_z).sum(axis=0)
    d_padded = np.zeros_like(c.padded)
    for j in range(k):
        g.depthwise[j] = (d_z * c.padded[:, j:j + L]).sum(axis=(0, 1))
        d_padded[:, j:j + L] += p.depthwise[j] * d_z
    d_glu = d_padded[:, half:half + L] * c.keep
    d_a = np.concatenate([d_glu * c.sg, d_glu * c.val * c.sg * (1.0 - c.sg)], axis=-1)
    g.W_in = flat(c.x).T @ flat(d_a)
    g.b_in = flat(d_a).sum(axis=0)
    return d_a @ p.W_in.T, g


def deep_norm(x, fx, alpha: float, ln: LNParams, eps: float = LN_EPS, *, return_cache: bool = False):
    """``LayerNorm(alpha * x + fx)``."""
    x = np.asarray(x, dtype=DTYPE)
    fx = np.asarray(fx, dtype=DTYPE)
    if x.shape != fx.shape:
        raise ValueError(f"residual shapes differ: {x.shape} vs {fx.shape}")
    return layer_norm(alpha * x + fx, ln.gamma, ln.beta, eps, return_cache=return_cache)


# ---------------------------------------------------------------------------
# block
# ---------------------------------------------------------------------------


@dataclass
class BlockCache:
    params: BlockParams
    cfg: EncoderConfig
    alpha: float
    shape: tuple
    stage_caches: list = field(default_factory=list)  # (sub-layer cache, ln cache or None)


def _residual(x, fx, alpha, ln: LNParams | None, eps):
    if ln is None:
        return alpha * x + fx, None
    return deep_norm(x, fx, alpha, ln, eps, return_cache=True)


def block_forward(x, params: BlockParams, cfg: EncoderConfig, mask: PaddingMask, rng: SeededRng,
                  training: bool = False, *, index: int = 0, trace: list | None = None):
    """One deep sparse Conformer block.  Returns ``(y, cache)``."""
    x = np.asarray(x, dtype=DTYPE)
    b, L, d = x.shape
    if d != cfg.d:
        raise ValueError(f"input width {d} != configured width {cfg.d}")
    original = cfg.norm_style == "original"
    alpha = 1.0 if original else params.deepnorm.alpha
    lns = [None, None, None, params.ln4] if original else [params.ln1, params.ln2, params.ln3, params.ln4]
    cache = BlockCache(params, cfg, alpha, x.shape)

    def emit(stage):
        if trace is not None:
            trace.append((index, stage, alpha))
        log.debug("block=%d stage=%s alpha=%r", index, stage, alpha)

    f, c = macaron_ffn(x, params.ffn1, return_cache=True)
    emit("ffn1")
    x, ln_c = _residual(x, 0.5 * f, alpha, lns[0], cfg.ln_eps)
    cache.stage_caches.append((c, ln_c))

    f, c, _ = attention_forward(x, relpos_encoding(L, d), x, params.attn, cfg.attention_config(), mask,
                                rng.child("mhsa"), training)
    emit("mhsa")
    x, ln_c = _residual(x, f, alpha, lns[1], cfg.ln_eps)
    cache.stage_caches.append((c, ln_c))

    f, c = conv_module(x, params.conv, mask.valid_len, eps=cfg.ln_eps, return_cache=True)
    emit("conv")
    x, ln_c = _residual(x, f, alpha, lns[2], cfg.ln_eps)
    cache.stage_caches.append((c, ln_c))

    f, c = macaron_ffn(x, params.ffn2, return_cache=True)
    emit("ffn2")
    x, ln_c = _residual(x, 0.5 * f, alpha, lns[3], cfg.ln_eps)
    cache.stage_caches.append((c, ln_c))
    return x, cache


def block_backward(cache: BlockCache, d_y):
    """Returns ``(d_x, grads)`` with grads shaped like the block's parameters."""
    d = np.asarray(d_y, dtype=DTYPE)
    if d.shape != cache.shape:
        raise ValueError(f"d_y shape {d.shape} != block output shape {cache.shape}")
    g = zeros_like_tree(cache.params)
    ln_names = ("ln1", "ln2", "ln3", "ln4")
    for stage in reversed(range(4)):
        sub_cache, ln_cache = cache.stage_caches[stage]
        if ln_cache is not None:
            d, d_gamma, d_beta = layer_norm_backward(ln_cache, d)
            setattr(g, ln_names[stage], LNParams(d_gamma, d_beta))
        d_skip = cache.alpha * d
        if stage == 0:
            d_in, g.ffn1 = ffn_backward(sub_cache, 0.5 * d)
        elif stage == 1:
            ag = attention_backward(sub_cache, d)
            d_in, g.attn = ag.X + ag.Y, ag.weights
        elif stage == 2:
            d_in, g.conv = conv_backward(sub_cache, d)
        else:
            d_in, g.ffn2 = ffn_backward(sub_cache, 0.5 * d)
        d = d_skip + d_in
    return d, g


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


@dataclass
class EncoderCache:
    pre_ln: object
    blocks: list


def encoder_forward(x, blocks: list, cfg: EncoderConfig, mask: PaddingMask, rng: SeededRng,
                    training: bool = False, *, trace: list | None = None):
    """Optional input LayerNorm, then the block stack.  Returns ``(y, cache)``."""
    if not blocks:
        raise ValueError("encoder needs at least one block")
    x = np.asarray(x, dtype=DTYPE)
    pre_cache = None
    if cfg.norm_style == "deepnorm_postln_mixture":
        ln = blocks[0].pre_ln
        if ln is None:
            raise ValueError("deepnorm_postln_mixture needs pre_ln on the first block")
        x, pre_cache = layer_norm(x, ln.gamma, ln.beta, cfg.ln_eps, return_cache=True)
    caches = []
    for i, p in enumerate(blocks):
        x, c = block_forward(x, p, cfg, mask, rng.child(("block", i)), training, index=i, trace=trace)
        caches.append(c)
    return x, EncoderCache(pre_cache, caches)


def encoder_backward(cache: EncoderCache, d_y):
    """Returns ``(d_x, grads)``; ``grads`` is a list of per-block parameter gradients."""
    if not cache.blocks:
        raise ValueError("empty encoder cache")
    if np.shape(d_y) != cache.blocks[-1].shape:
        raise ValueError("d_y does not match the cached encoder output")
    grads = [None] * len(cache.blocks)
    d = d_y
    for i in reversed(range(len(cache.blocks))):
        d, grads[i] = block_backward(cache.blocks[i], d)
    if cache.pre_ln is not None:
        d, d_gamma, d_beta = layer_norm_backward(cache.pre_ln, d)
        grads[0].pre_ln = LNParams(d_gamma, d_beta)
    return d, grads


def _ffn_init(rng: SeededRng, d: int, d_ffn: int, gain: float) -> FFNParams:
    return FFNParams(
        W1=xavier_init(rng.child("W1"), d, d_ffn, gain),
        b1=np.zeros(d_ffn, dtype=DTYPE),
        W2=xavier_init(rng.child("W2"), d_ffn, d, gain),
        b2=np.zeros(d, dtype=DTYPE),
    )


def init_encoder(cfg: EncoderConfig, rng: SeededRng) -> list:
    """Xavier init; attention and FFN matrices use the DeepNorm gain for the deepnorm style."""
    deep = cfg.norm_style == "deepnorm_postln_mixture"
    if deep:
        dn = DeepNormParams.for_depth(cfg.n_blocks, cfg.n_decoder_blocks)
    else:
        dn = DeepNormParams(1.0, 1.0, cfg.n_blocks, cfg.n_decoder_blocks)
    d = cfg.d
    blocks = []
    for i in range(cfg.n_blocks):
        r = rng.child(("block", i))
        conv = ConvParams(
            W_in=xavier_init(r.child("conv.W_in"), d, 2 * d),
            b_in=np.zeros(2 * d, dtype=DTYPE),
            depthwise=xavier_init(r.child("conv.depthwise"), cfg.kernel, d),
            b_dw=np.zeros(d, dtype=DTYPE),
            norm=LNParams.identity(d),
            W_out=xavier_init(r.child("conv.W_out"), d, d),
            b_out=np.zeros(d, dtype=DTYPE),
        )
        blocks.append(BlockParams(
            ffn1=_ffn_init(r.child("ffn1"), d, cfg.d_ffn, dn.beta),
            attn=AttentionWeights.init(cfg.attention_config(), r.child("attn"), dn.beta),
            conv=conv,
            ffn2=_ffn_init(r.child("ffn2"), d, cfg.d_ffn, dn.beta),
            ln1=LNParams.identity(d), ln2=LNParams.identity(d),
            ln3=LNParams.identity(d), ln4=LNParams.identity(d),
            deepnorm=DeepNormParams(dn.alpha, dn.beta, dn.N, dn.M),
            pre_ln=LNParams.identity(d) if deep and i == 0 else None,
        ))
    return blocks


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, cfg: EncoderConfig, blocks: list) -> None:
    out = {"config": asdict(cfg), "blocks": []}
    for p in blocks:
        named = {n: tensor_to_json(v) for n, v in named_arrays(p)}
        named["deepnorm.alpha"] = tensor_to_json(np.float64(p.deepnorm.alpha))
        named["deepnorm.beta"] = tensor_to_json(np.float64(p.deepnorm.beta))
        out["blocks"].append(named)
    with open(path, "w") as fh:
        json.dump(out, fh)


def load_checkpoint(path) -> tuple[EncoderConfig, list]:
    with open(path) as fh:
        raw = json.load(fh)
    cfg = EncoderConfig.from_dict(raw["config"])
    template = init_encoder(cfg, SeededRng(0))
    for p, named in zip(template, raw["blocks"], strict=True):
        for name, _ in list(named_arrays(p)):
            value = tensor_from_json(named[name])
            if value.shape != get_path(p, name).shape:
                raise ValueError(f"{name}: checkpoint shape {value.shape} != expected {get_path(p, name).shape}")
            set_path(p, name, value)
        p.deepnorm.alpha = float(tensor_from_json(named["deepnorm.alpha"]))
        p.deepnorm.beta = float(tensor_from_json(named["deepnorm.beta"]))
    return cfg, template


def block_grad_norm(g: BlockParams) -> float:
    return math.sqrt(sum(float(np.sum(v * v)) for _, v in named_arrays(g)))
