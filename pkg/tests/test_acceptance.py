"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v`` (or ``python
tests/test_acceptance.py``); the lines are repeated in the terminal summary.
"""

import csv
import io
import math
import sys
import time

import mpmath
import numpy as np

from conftest import ACCEPTANCE_LINES
from dsc.attention import PaddingMask, sparsity_measure
from dsc.checks import SUITES, equiv, gradcheck
from dsc.cli import main
from dsc.conformer import (
    EncoderConfig,
    deepnorm_alpha,
    deepnorm_beta,
    encoder_backward,
    encoder_forward,
    init_encoder,
    named_arrays,
)
from dsc.harness import TRAIN_DEFAULT_CONFIG, TrainSettings, bench, bench_gates, combine_losses, train
from dsc.tensor import SeededRng, topk_rows


def report(n, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line


def test_1_sparse_dense_collapse():
    t0 = time.perf_counter()
    rep = equiv(64, seeds=range(10))
    dt = time.perf_counter() - t0
    ok = rep["max_abs_diff"] < 1e-10 and dt < 30
    report(1, ok, f"L=1..64 x 10 seeds, max |sparse - dense| = {rep['max_abs_diff']:.3e} (< 1e-10), {dt:.1f}s (< 30s)")


def test_2_gradient_correctness():
    t0 = time.perf_counter()
    rep = gradcheck("all", seed=0)
    dt = time.perf_counter() - t0
    worst = {c["case"]: c["max_rel_error"] for c in rep["cases"]}
    covered = set(SUITES)
    ok = rep["passed"] and max(worst.values()) < 1e-4 and covered == {"attention", "block", "encoder"} and dt < 120
    detail = ", ".join(f"{k}: {v:.1e}" for k, v in worst.items())
    report(2, ok, f"max rel. error < 1e-4 [{detail}], {dt:.1f}s (< 120s)")


def test_3_complexity_counters():
    t0 = time.perf_counter()
    cfg = EncoderConfig(d=64, h=2, c1=5.0, c2=5.0)
    pts = bench(cfg, [256, 512, 1024, 2048, 4096], repeats=1)
    dt = time.perf_counter() - t0
    by = {(p.L, p.mode): p for p in pts}
    dense_ratio = by[4096, "dense"].score_macs / by[2048, "dense"].score_macs
    sparse_ratio = by[4096, "sparse"].score_macs / by[2048, "sparse"].score_macs
    peaks = all(by[L, "sparse"].peak_elements < by[L, "dense"].peak_elements for L in (512, 1024, 2048, 4096))
    ok = dense_ratio == 4.0 and sparse_ratio <= 2.4 and peaks and bench_gates(pts)["passed"] and dt < 180
    report(3, ok, f"dense score ratio 2048->4096 = {dense_ratio!r} (== 4.0), sparse = {sparse_ratio:.4f} (<= 2.4), "
                  f"sparse peak < dense peak for L >= 512: {peaks}, {dt:.1f}s (< 180s)")


def test_4_deepnorm_scalars():
    mpmath.mp.dps = 50

    def alpha_hp(N, M):
        return float(mpmath.mpf("0.81") * (mpmath.mpf(N) ** 4 * M) ** (mpmath.mpf(1) / 16))

    errs = [abs(deepnorm_alpha(N, M) - alpha_hp(N, M)) for N, M in ((12, 3), (17, 3))]
    near = abs(deepnorm_alpha(12, 3) - 1.6147) < 1e-3 and abs(deepnorm_alpha(17, 3) - 1.7616) < 1e-3
    exact = deepnorm_alpha(1, 1) == 0.81 and deepnorm_beta(1, 1) == 0.87
    ok = max(errs) < 1e-3 and near and exact
    report(4, ok, f"alpha(12,3)={deepnorm_alpha(12, 3):.6f}, alpha(17,3)={deepnorm_alpha(17, 3):.6f}, "
                  f"max dev from high precision {max(errs):.1e}; alpha(1,1)/beta(1,1) exact: {exact}")


def test_5_max_mean_measure():
    keys = np.eye(3)
    cases = [([2.0, 0.0, 1.0], 1.0), ([4.0, 4.0, 4.0], 0.0), ([10.0, 0.0, 0.0], 10 - 10 / 3)]
    errs = [abs(sparsity_measure(np.array([q]), keys, 3)[0] - e) for q, e in cases]
    g = np.random.default_rng(0)
    mismatches = 0
    for L in range(1, 65):
        for v in (g.normal(size=(3, L)), g.integers(-2, 3, size=(3, L)).astype(float)):
            for k in range(L + 1):
                got = topk_rows(v, k)
                for r in range(3):
                    brute = sorted(np.argsort(-v[r], kind="stable")[:k].tolist())
                    mismatches += got[r].tolist() != brute
    ok = max(errs) < 1e-12 and mismatches == 0
    report(5, ok, f"hand fixtures max err {max(errs):.1e} (< 1e-12); top-k vs argsort mismatches for L <= 64: "
                  f"{mismatches}")


def test_6_depth_stability():
    t0 = time.perf_counter()
    cfg = EncoderConfig(n_blocks=50, d=16, d_ffn=32, h=2, kernel=5, mode="sparse")
    blocks = init_encoder(cfg, SeededRng(0))
    x = np.random.default_rng(0).normal(size=(2, 32, 16))
    y, cache = encoder_forward(x, blocks, cfg, PaddingMask([32, 20]), SeededRng(0))
    _, grads = encoder_backward(cache, np.random.default_rng(1).normal(size=y.shape))
    gmax = [max(float(np.max(np.abs(v))) for _, v in named_arrays(g)) for g in grads]
    deep_ok = bool(np.all(np.isfinite(y))) and all(np.isfinite(gmax)) and min(gmax) > 0

    settings = TrainSettings(steps=500, lr=1e-3)
    a = train(TRAIN_DEFAULT_CONFIG, settings, seed=0)
    b = train(TRAIN_DEFAULT_CONFIG, settings, seed=0)
    dt = time.perf_counter() - t0
    drop = a[-1].loss / a[0].loss
    finite = all(r.status == "ok" and math.isfinite(r.loss) for r in a)
    ok = deep_ok and finite and len(a) == 500 and drop < 0.2 and a == b and dt < 300
    report(6, ok, f"50 blocks d=16 finite with nonzero grads: {deep_ok}; N=24 d=32 sparse 500 steps loss "
                  f"{a[0].loss:.4f} -> {a[-1].loss:.4f} (ratio {drop:.4f} < 0.2), repeat identical: {a == b}, "
                  f"{dt:.1f}s (< 300s)")


def test_7_loss_combiner():
    unit = combine_losses(1, 1, 1)
    mixed = combine_losses(2, 1, 0)
    ok = unit == 1.0 and abs(mixed - 1.09) < 1e-12
    report(7, ok, f"combine(1,1,1) = {unit!r}, combine(2,1,0) = {mixed!r}")


def test_8_determinism(tmp_path):
    runs = {
        "bench": ["bench", "--lengths", "64,128,256,512", "--dim", "16", "--seed", "7"],
        "gradcheck": ["gradcheck", "--suite", "attention", "--seed", "7"],
        "equiv": ["equiv", "--L-max", "24", "--n-seeds", "3", "--seed", "7"],
        "equiv-unsaturated": ["equiv", "--L-max", "24", "--n-seeds", "3", "--c2", "1", "--seed", "7"],
        "train": ["train", "--blocks", "3", "--dim", "16", "--heads", "2", "--steps", "5", "--seed", "7"],
    }

    def strip_timing(name, raw):
        if name != "bench":
            return raw
        rows = list(csv.reader(io.StringIO(raw.decode())))
        return [r[:4] for r in rows]

    same = {}
    for name, argv in runs.items():
        outs = []
        for i in range(2):
            out = tmp_path / f"{name}{i}"
            main([*argv, "--out", str(out)])
            outs.append(strip_timing(name, out.read_bytes()))
        same[name] = outs[0] == outs[1]
    report(8, all(same.values()), "identical artifacts across repeated runs: "
           + ", ".join(f"{k}={v}" for k, v in same.items()))


if __name__ == "__main__":
    import pytest

    sys.exit(pytest.main([__file__, "-v"]))
