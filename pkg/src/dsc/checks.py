"""Oracle suites used by ``dsc gradcheck`` / ``dsc equiv`` and by the tests.

Every analytic gradient is compared against central finite differences of
the scalar probe ``sum(out * G)``.
"""

from __future__ import annotations

import copy
from dataclasses import replace

import numpy as np

from .attention import (
    AttentionConfig,
    AttentionWeights,
    PaddingMask,
    attention_backward,
    dense_forward,
    probsparse_forward,
    relpos_encoding,
)
from .conformer import (
    EncoderConfig,
    block_backward,
    block_forward,
    encoder_backward,
    encoder_forward,
    get_path,
    init_encoder,
    named_arrays,
    set_path,
)
from .tensor import SeededRng, finite_diff_grad, max_rel_error

GRAD_TOL = 1e-4
PROBES = ("random", "ones", "zero")


def make_probe(kind: str, shape, seed: int) -> np.ndarray:
    if kind == "random":
        return np.random.default_rng(seed).normal(size=shape)
    if kind == "ones":
        return np.ones(shape)
    if kind == "zero":
        return np.zeros(shape)
    raise ValueError(f"unknown probe {kind!r}; expected one of {PROBES}")


def perturbed_blocks(cfg: EncoderConfig, seed: int, scale: float = 0.1) -> list:
    """Initialised blocks with every array nudged off its init value.

    Zero biases, unit gammas and zero U1/U2 would hide whole gradient paths.
    """
    blocks = init_encoder(cfg, SeededRng(seed))
    g = np.random.default_rng(seed)
    for p in blocks:
        for name, v in list(named_arrays(p)):
            set_path(p, name, v + scale * g.normal(size=v.shape))
    return blocks


def _random_attention(cfg: AttentionConfig, seed: int) -> AttentionWeights:
    g = np.random.default_rng(seed)
    mats = {n: g.normal(scale=0.4, size=(cfg.d, cfg.d)) for n in ("W_Q", "W_K", "W_V", "W_P", "W_O")}
    return AttentionWeights(
        U1=g.normal(scale=0.3, size=(cfg.h, cfg.d_head)), U2=g.normal(scale=0.3, size=(cfg.h, cfg.d_head)), **mats
    )


def attention_gradcheck(mode="dense", b=1, L=3, d=4, h=1, seed=0, probe="random", c2=1.0) -> dict:
    """Max relative error per group (input X, X_P and each weight) for one attention call."""
    cfg = AttentionConfig(h=h, d=d, c1=1.0, c2=c2, mode=mode)
    w = _random_attention(cfg, seed)
    X = np.random.default_rng(seed + 1).normal(size=(b, L, d))
    XP = relpos_encoding(L, d)
    mask = PaddingMask.full(b, L)
    rng = SeededRng(seed)
    G = make_probe(probe, (b, L, d), seed + 2)
    fwd = probsparse_forward if mode == "sparse" else dense_forward

    def value(X_, XP_, w_):
        return float(np.sum(fwd(X_, XP_, X_, w_, cfg, mask, rng)[0] * G))

    _, cache, _ = fwd(X, XP, X, w, cfg, mask, rng)
    g = attention_backward(cache, G)
    report = {
        "X": max_rel_error(g.X + g.Y, finite_diff_grad(lambda t: value(t, XP, w), X)),
        "X_P": max_rel_error(g.X_P, finite_diff_grad(lambda t: value(X, t, w), XP)),
    }
    for n in w.names():
        num = finite_diff_grad(lambda t, n=n: value(X, XP, replace(w, **{n: t})), getattr(w, n))
        report[f"attn.{n}"] = max_rel_error(getattr(g.weights, n), num)
    return report


def _stack_gradcheck(cfg: EncoderConfig, blocks, x, mask, seed, probe, single_block):
    rng = SeededRng(seed)
    G = make_probe(probe, x.shape, seed + 2)

    def run(x_, blocks_):
        if single_block:
            return block_forward(x_, blocks_[0], cfg, mask, rng)
        return encoder_forward(x_, blocks_, cfg, mask, rng)

    y, cache = run(x, blocks)
    if single_block:
        dx, g = block_backward(cache, G)
        grads = [g]
    else:
        dx, grads = encoder_backward(cache, G)

    report = {"x": max_rel_error(dx, finite_diff_grad(lambda t: float(np.sum(run(t, blocks)[0] * G)), x))}
    for i, p in enumerate(blocks):
        for name, v in named_arrays(p):
            def value(t, i=i, name=name):
                trial = copy.deepcopy(blocks)
                set_path(trial[i], name, t)
                return float(np.sum(run(x, trial)[0] * G))

            key = name if single_block else f"block{i}.{name}"
            report[key] = max_rel_error(get_path(grads[i], name), finite_diff_grad(value, v))
    return report


def block_gradcheck(mode="dense", b=1, L=5, d=8, h=2, d_ffn=16, kernel=3, seed=0, probe="random",
                    norm_style="deepnorm_postln_mixture", c2=1.0) -> dict:
    cfg = EncoderConfig(n_blocks=1, d=d, d_ffn=d_ffn, h=h, kernel=kernel, c1=1.0, c2=c2, mode=mode,
                        norm_style=norm_style)
    blocks = perturbed_blocks(cfg, seed)
    blocks[0].deepnorm.alpha = 1.7  # away from 1 so the skip scaling is exercised
    x = np.random.default_rng(seed + 1).normal(size=(b, L, d))
    return _stack_gradcheck(cfg, blocks, x, PaddingMask.full(b, L), seed, probe, single_block=True)


def encoder_gradcheck(n_blocks=2, mode="dense", b=1, L=5, d=8, h=2, d_ffn=16, kernel=3, seed=0,
                      probe="random", norm_style="deepnorm_postln_mixture", c2=1.0) -> dict:
    cfg = EncoderConfig(n_blocks=n_blocks, d=d, d_ffn=d_ffn, h=h, kernel=kernel, c1=1.0, c2=c2, mode=mode,
                        norm_style=norm_style)
    blocks = perturbed_blocks(cfg, seed)
    x = np.random.default_rng(seed + 1).normal(size=(b, L, d))
    return _stack_gradcheck(cfg, blocks, x, PaddingMask.full(b, L), seed, probe, single_block=False)


SUITES = {
    "attention": [
        ("dense 1x3x4", lambda s, p: attention_gradcheck("dense", 1, 3, 4, 1, s, p)),
        ("dense 1x8x16 h4", lambda s, p: attention_gradcheck("dense", 1, 8, 16, 4, s, p)),
        ("sparse 1x8x16 h4", lambda s, p: attention_gradcheck("sparse", 1, 8, 16, 4, s, p)),
    ],
    "block": [
        ("dense block 1x5x8", lambda s, p: block_gradcheck("dense", seed=s, probe=p)),
        ("sparse block 1x8x8", lambda s, p: block_gradcheck("sparse", L=8, seed=s, probe=p)),
    ],
    "encoder": [
        ("dense encoder N=2 1x5x8", lambda s, p: encoder_gradcheck(2, "dense", seed=s, probe=p)),
    ],
}


def gradcheck(suite: str, seed: int = 0, probe: str = "random", tol: float = GRAD_TOL) -> dict:
    """Run one suite (or ``all``) and summarise the worst error per case."""
    names = list(SUITES) if suite == "all" else [suite]
    for n in names:
        if n not in SUITES:
            raise ValueError(f"unknown gradcheck suite {n!r}; expected one of {list(SUITES)} or 'all'")
    cases = []
    for n in names:
        for label, fn in SUITES[n]:
            groups = fn(seed, probe)
            worst = max(groups.values())
            cases.append({"suite": n, "case": label, "max_rel_error": worst, "passed": worst < tol,
                          "groups": groups})
    return {"seed": seed, "probe": probe, "tolerance": tol, "cases": cases,
            "passed": all(c["passed"] for c in cases)}


def equiv(L_max: int = 64, seeds=range(10), d: int = 8, h: int = 2, c2: float | None = None) -> dict:
    """Sparse vs dense attention for every L in [1, L_max].

    ``c2=None`` saturates selection so the two must agree elementwise.  With a
    finite ``c2`` the report lists which rows differ and whether they are
    exactly the rows some head left unselected.
    """
    rows = []
    worst = 0.0
    consistent = True
    for L in range(1, L_max + 1):
        cfg = AttentionConfig(h=h, d=d, c2=float(L) if c2 is None else c2, mode="sparse")
        dense = replace(cfg, mode="dense")
        XP = relpos_encoding(L, d)
        mask = PaddingMask.full(1, L)
        for seed in seeds:
            w = _random_attention(cfg, 7919 * L + seed)
            X = np.random.default_rng(104729 * L + seed).normal(size=(1, L, d))
            rng = SeededRng(seed)
            out_s, cache, _ = probsparse_forward(X, XP, X, w, cfg, mask, rng)
            out_d, _, _ = dense_forward(X, XP, X, w, dense, mask, rng)
            diff = float(np.max(np.abs(out_s - out_d)))
            worst = max(worst, diff)
            if c2 is not None:
                # a row can only differ from dense if some head left it unselected
                top = cache.selection.top_query_idx[0]
                unselected = [i for i in range(L) if any(i not in top[hd] for hd in range(h))]
                differing = np.flatnonzero(np.max(np.abs(out_s - out_d)[0], axis=-1) > 1e-10).tolist()
                ok = differing == unselected
                consistent &= ok
                rows.append({"L": L, "seed": seed, "max_abs_diff": diff, "differing_rows": differing,
                             "unselected_rows": unselected, "rows_consistent": ok})
    report = {"L_max": L_max, "seeds": list(seeds), "saturated": c2 is None, "max_abs_diff": worst}
    if c2 is None:
        report["passed"] = worst < 1e-10
    else:
        report["c2"] = c2
        report["rows"] = rows
        report["passed"] = consistent
    return report
