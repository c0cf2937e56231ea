import csv
import io
import itertools
import json
import math
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

import dsc.harness as harness
from dsc.attention import AttentionConfig, flop_estimate
from dsc.checks import equiv, gradcheck
from dsc.cli import main, resolve_config, build_parser
from dsc.conformer import EncoderConfig
from dsc.harness import (
    BenchPoint,
    TrainSettings,
    baseline_config,
    bench,
    bench_gates,
    combine_losses,
    depth_stability_report,
    format_bench_csv,
    loss_reduction_passed,
    synth_task,
    train,
)
from dsc.tensor import SeededRng

TINY = EncoderConfig(n_blocks=2, d=8, d_ffn=16, h=2, kernel=3, mode="sparse")
TINY_SETTINGS = TrainSettings(steps=4, n_samples=2, seq_len=8)


class TestCombineLosses:
    def test_unit(self):
        assert combine_losses(1, 1, 1) == 1.0

    def test_zero(self):
        assert combine_losses(0, 0, 0) == 0

    def test_hand_value(self):
        assert abs(combine_losses(2, 1, 0) - 1.09) < 1e-12

    def test_weights(self):
        assert abs(combine_losses(1, 0, 0) - 0.3) < 1e-15
        assert abs(combine_losses(0, 1, 0) - 0.49) < 1e-15
        assert abs(combine_losses(0, 0, 1) - 0.21) < 1e-15

    @pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
    def test_non_finite(self, bad):
        with pytest.raises(ValueError):
            combine_losses(1.0, bad, 0.0)

    def test_monotone(self):
        grid = [0.0, 0.5, 1.0, 3.0]
        for a, b, c in itertools.product(grid, repeat=3):
            base = combine_losses(a, b, c)
            assert combine_losses(a + 0.1, b, c) >= base
            assert combine_losses(a, b + 0.1, c) >= base
            assert combine_losses(a, b, c + 0.1) >= base


class TestSynthTask:
    def test_deterministic(self):
        a = synth_task(SeededRng(3), 4, 10, 8, 5)
        b = synth_task(SeededRng(3), 4, 10, 8, 5)
        assert np.array_equal(a.x, b.x) and np.array_equal(a.labels, b.labels)
        c = synth_task(SeededRng(4), 4, 10, 8, 5)
        assert not np.array_equal(a.x, c.x)

    def test_balanced_at_10k(self):
        t = synth_task(SeededRng(0), 100, 100, 4, 7)
        counts = np.bincount(t.labels.ravel(), minlength=7)
        expect = 10_000 / 7
        assert np.all(np.abs(counts - expect) <= 0.05 * expect)
        # constant majority guess is no better than chance
        assert abs(counts.max() / 10_000 - 1 / 7) < 0.01

    def test_label_recoverable_from_left_neighbour(self):
        t = synth_task(SeededRng(1), 3, 12, 16, 4)
        dist = np.linalg.norm(t.x[:, :, None, :] - t.codebook[None, None], axis=-1)
        decoded = dist.argmin(axis=-1)
        assert np.array_equal(decoded, t.tokens)
        assert np.array_equal(t.labels[:, 1:], decoded[:, :-1])
        assert np.array_equal(t.labels[:, 0], decoded[:, -1])

    def test_shapes(self):
        t = synth_task(SeededRng(0), 2, 5, 3, 2)
        assert t.x.shape == (2, 5, 3) and t.labels.shape == (2, 5) and t.valid_len == [5, 5]

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            synth_task(SeededRng(0), 2, 5, 3, 1)


class TestTrain:
    def test_lr_zero_constant_loss(self):
        recs = train(replace(TINY, mode="dense"), replace(TINY_SETTINGS, lr=0.0), seed=2)
        losses = [r.loss for r in recs]
        assert max(losses) - min(losses) <= 1e-12

    def test_lr_zero_saturated_sparse(self):
        recs = train(replace(TINY, c2=100.0), replace(TINY_SETTINGS, lr=0.0), seed=2)
        losses = [r.loss for r in recs]
        assert max(losses) - min(losses) <= 1e-12

    def test_deterministic(self):
        a = train(TINY, TINY_SETTINGS, seed=5)
        b = train(TINY, TINY_SETTINGS, seed=5)
        assert a == b
        assert len(a) == 4 and all(r.status == "ok" for r in a)

    def test_loss_drops_short_run(self):
        recs = train(TINY, replace(TINY_SETTINGS, steps=30, lr=3e-3), seed=0)
        assert recs[-1].loss < recs[0].loss

    def test_divergence_is_recorded(self, monkeypatch):
        real = harness.synth_task

        def poisoned(*a, **k):
            t = real(*a, **k)
            t.x[0, 0, 0] = np.nan
            return t

        monkeypatch.setattr(harness, "synth_task", poisoned)
        with np.errstate(all="ignore"):
            recs = train(TINY, TINY_SETTINGS, seed=0)
        assert len(recs) == 1 and recs[0].status == "diverged"
        assert not loss_reduction_passed(recs)

    def test_toy_scale_only(self):
        with pytest.raises(ValueError, match="toy scale"):
            train(replace(TINY, n_blocks=51), TINY_SETTINGS)

    def test_baseline_config(self):
        b = baseline_config(TINY)
        assert b.norm_style == "plain_postln" and b.d == TINY.d

    def test_depth_report(self):
        rep = depth_stability_report(replace(TINY, n_blocks=3), settings=TINY_SETTINGS)
        for k in ("deepnorm", "baseline"):
            assert len(rep[k]["block_grad_norms"]) == 3
            assert all(np.isfinite(rep[k]["block_grad_norms"]))


class TestBench:
    cfg = EncoderConfig(d=16, h=2)

    def test_counts_match_closed_form(self):
        pts = bench(self.cfg, [16, 32, 64], repeats=1)
        assert [(p.L, p.mode) for p in pts] == [(L, m) for L in (16, 32, 64) for m in ("dense", "sparse")]
        for p in pts:
            est = flop_estimate(replace(self.cfg.attention_config(), mode=p.mode), p.L)
            assert p.mac_count == est.mac_count and p.peak_elements == est.peak_elements

    def test_csv_schema_and_determinism(self):
        a = format_bench_csv(bench(self.cfg, [8, 16], repeats=2), with_timing=False)
        b = format_bench_csv(bench(self.cfg, [8, 16], repeats=2), with_timing=False)
        assert a == b
        assert a.splitlines()[0] == "L,mode,mac_count,peak_elements,wall_ns_median"

    def test_unsorted_lengths(self):
        with pytest.raises(ValueError):
            bench(self.cfg, [32, 16])

    def test_oom_point_is_recorded(self, monkeypatch):
        real = harness._bench_point

        def flaky(cfg, L, mode, repeats, rng):
            if L == 32 and mode == "dense":
                raise MemoryError
            return real(cfg, L, mode, repeats, rng)

        monkeypatch.setattr(harness, "_bench_point", flaky)
        pts = bench(self.cfg, [16, 32, 64], repeats=1)
        assert len(pts) == 6
        bad = [p for p in pts if p.status != "ok"]
        assert [(p.L, p.mode) for p in bad] == [(32, "dense")]
        row = [r for r in csv.reader(io.StringIO(format_bench_csv(pts))) if r[:2] == ["32", "dense"]][0]
        assert row[2:] == ["", "", ""]
        assert not bench_gates(pts)["passed"]

    def test_gates(self):
        cfg = AttentionConfig(h=1, d=4)
        pts = []
        for L in (512, 1024, 2048):
            for mode in ("dense", "sparse"):
                e = flop_estimate(replace(cfg, mode=mode), L)
                pts.append(BenchPoint(L, mode, e.mac_count, e.peak_elements, 0, e.score_macs))
        g = bench_gates(pts)
        assert g["passed"]
        kinds = {c["gate"] for c in g["checks"]}
        assert kinds == {"dense_score_ratio", "sparse_score_ratio", "sparse_peak_below_dense"}


class TestChecks:
    def test_zero_probe_is_exact(self):
        rep = gradcheck("attention", probe="zero")
        assert all(v == 0.0 for c in rep["cases"] for v in c["groups"].values())

    def test_dense_attention_small(self):
        rep = gradcheck("attention")
        assert rep["cases"][0]["max_rel_error"] < 1e-5

    def test_unknown_suite(self):
        with pytest.raises(ValueError):
            gradcheck("nope")

    def test_equiv_single_query_exact(self):
        assert equiv(1, seeds=range(3))["max_abs_diff"] == 0.0

    def test_equiv_unsaturated_rows(self):
        rep = equiv(12, seeds=range(2), c2=1.0)
        assert rep["passed"]
        assert any(r["differing_rows"] for r in rep["rows"])


class TestCli:
    def test_config_precedence(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"d": 16, "h": 4, "n_blocks": 3}))
        args = build_parser().parse_args(["train", "--config", str(cfg), "--heads", "2"])
        r = resolve_config(args, EncoderConfig(d=32, h=8, d_ffn=64))
        assert (r.d, r.h, r.n_blocks, r.d_ffn) == (16, 2, 3, 64)

    def test_bad_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"depth": 3}))
        assert main(["equiv", "--config", str(cfg), "--L-max", "2"]) == 2

    def _twice(self, tmp_path, argv):
        outs = []
        for i in range(2):
            out = tmp_path / f"out{i}"
            code = main([*argv, "--out", str(out)])
            outs.append(out.read_bytes())
        return code, outs

    def test_bench_deterministic(self, tmp_path):
        code, (a, b) = self._twice(tmp_path, ["bench", "--lengths", "512,1024,2048", "--dim", "16", "--no-timing"])
        assert code == 0 and a == b

    def test_bench_timing_column_only_differs(self, tmp_path):
        _, (a, b) = self._twice(tmp_path, ["bench", "--lengths", "16,32", "--repeats", "1"])
        strip = lambda t: [r[:4] for r in csv.reader(io.StringIO(t.decode()))]  # noqa: E731
        assert strip(a) == strip(b)

    def test_gradcheck_deterministic(self, tmp_path):
        code, (a, b) = self._twice(tmp_path, ["gradcheck", "--suite", "attention", "--seed", "3"])
        assert code == 0 and a == b
        assert json.loads(a)["passed"]

    def test_equiv_deterministic(self, tmp_path):
        code, (a, b) = self._twice(tmp_path, ["equiv", "--L-max", "16", "--n-seeds", "3"])
        assert code == 0 and a == b

    def test_train_deterministic(self, tmp_path):
        argv = ["train", "--blocks", "2", "--dim", "8", "--heads", "2", "--steps", "3", "--seed", "4"]
        _, (a, b) = self._twice(tmp_path, argv)
        assert a == b
        rows = list(csv.DictReader(io.StringIO(a.decode())))
        assert [r["run"] for r in rows] == ["main"] * 3 + ["baseline"] * 3

    def test_failing_gate_exit_status(self, tmp_path):
        # three steps cannot cut the loss by 5x
        assert main(["train", "--blocks", "1", "--dim", "8", "--heads", "2", "--steps", "3", "--no-baseline",
                     "--out", str(tmp_path / "t.csv")]) == 1

    def test_verbose_trace(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "dsc.cli", "train", "--blocks", "2", "--dim", "8", "--heads", "2", "--steps", "1",
             "--no-baseline", "--verbose", "--out", str(tmp_path / "t.csv")],
            capture_output=True, text=True, check=False)
        lines = [ln for ln in proc.stderr.splitlines() if ln.startswith("dsc.trace")]
        assert len(lines) == 8
        assert lines[0].startswith("dsc.trace: block=0 stage=ffn1 alpha=")

    def test_stdout_output(self, capsys):
        assert main(["equiv", "--L-max", "3", "--n-seeds", "1"]) == 0
        assert json.loads(capsys.readouterr().out)["passed"]
