"""Loss combiner, toy training loop and the complexity sweep."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from .attention import AttentionWeights, PaddingMask, attention_forward, flop_estimate, relpos_encoding
from .conformer import EncoderConfig, encoder_backward, encoder_forward, init_encoder, named_arrays
from .tensor import SeededRng, softmax_rows

log = logging.getLogger(__name__)

CTC_WEIGHT = 0.3
L2R_WEIGHT = 0.7
BENCH_COLUMNS = ("L", "mode", "mac_count", "peak_elements", "wall_ns_median")
TRAIN_COLUMNS = ("run", "step", "loss", "grad_norm", "lr", "status")


def combine_losses(ctc: float, att_l2r: float, att_r2l: float) -> float:
    """Joint CTC / bidirectional-attention objective."""
    vals = (ctc, att_l2r, att_r2l)
    if not all(math.isfinite(float(v)) for v in vals):
        raise ValueError(f"non-finite loss component in {vals}")
    att = L2R_WEIGHT * att_l2r + (1 - L2R_WEIGHT) * att_r2l
    return CTC_WEIGHT * ctc + (1 - CTC_WEIGHT) * att


# -- synthetic task ---------------------------------------------------------


@dataclass
class SynthTask:
    x: np.ndarray  # (n, L, d)
    labels: np.ndarray  # (n, L) int
    valid_len: list
    n_classes: int
    tokens: np.ndarray  # (n, L) int, the frame identities behind ``x``
    codebook: np.ndarray  # (n_classes, d)


def synth_task(rng: SeededRng, n_samples: int, L: int, d: int, n_classes: int, noise: float = 0.1) -> SynthTask:
    """Frame classification where a frame's label is the token one step to its left.

    Tokens are drawn as a shuffled tiling of the classes, so the label histogram
    is balanced to within one count. The shift wraps around, so the first frame
    has to look at the far end of its sequence.
    """
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    if n_samples < 1 or L < 1 or d < 1:
        raise ValueError("n_samples, L and d must be >= 1")
    g = rng.generator()
    total = n_samples * L
    tokens = np.resize(np.arange(n_classes), total)
    g.shuffle(tokens)
    tokens = tokens.reshape(n_samples, L)
    codebook = g.normal(size=(n_classes, d))
    x = codebook[tokens] + noise * g.normal(size=(n_samples, L, d))
    labels = np.roll(tokens, 1, axis=1)
    return SynthTask(x=x, labels=labels, valid_len=[L] * n_samples, n_classes=n_classes, tokens=tokens,
                     codebook=codebook)


# -- training ---------------------------------------------------------------


@dataclass(frozen=True)
class TrainRecord:
    step: int
    loss: float
    grad_norm: float
    lr: float
    status: str = "ok"


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 500
    lr: float = 1e-3
    n_samples: int = 8
    seq_len: int = 32
    n_classes: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8


# toy-scale encoder used when the caller gives no config of their own
TRAIN_DEFAULT_CONFIG = EncoderConfig(n_blocks=24, d=32, d_ffn=64, h=4, kernel=7, mode="sparse")
MAX_TRAIN_DIM = 64
MAX_TRAIN_BLOCKS = 50


@dataclass
class _Head:
    W: np.ndarray
    b: np.ndarray


def _cross_entropy(logits, labels, valid_len):
    """Mean CE over valid frames, with its gradient wrt ``logits``."""
    probs = softmax_rows(logits)
    valid = np.arange(logits.shape[1])[None, :] < np.asarray(valid_len)[:, None]
    n = int(valid.sum())
    picked = np.take_along_axis(probs, labels[..., None], axis=-1)[..., 0]
    with np.errstate(divide="ignore"):
        loss = float(-np.sum(np.log(picked)[valid]) / n)
    d_logits = probs.copy()
    np.put_along_axis(d_logits, labels[..., None], np.take_along_axis(d_logits, labels[..., None], -1) - 1, -1)
    d_logits *= valid[..., None] / n
    return loss, d_logits


class _Adam:
    def __init__(self, params: list, s: TrainSettings):
        self.params = params
        self.s = s
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list, lr: float) -> None:
        s = self.s
        self.t += 1
        c1 = 1 - s.beta1**self.t
        c2 = 1 - s.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= s.beta1
            m += (1 - s.beta1) * g
            v *= s.beta2
            v += (1 - s.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + s.adam_eps)


def _loss_and_grads(blocks, head, cfg, task, rng, training=True):
    mask = PaddingMask(task.valid_len)
    y, cache = encoder_forward(task.x, blocks, cfg, mask, rng, training=training)
    logits = y @ head.W + head.b
    loss, d_logits = _cross_entropy(logits, task.labels, task.valid_len)
    d_y = d_logits @ head.W.T
    g_head = _Head(W=np.einsum("bld,blc->dc", y, d_logits), b=d_logits.sum(axis=(0, 1)))
    _, g_blocks = encoder_backward(cache, d_y)
    return loss, g_blocks, g_head


def _flatten(blocks, head) -> list:
    out = [v for p in blocks for _, v in named_arrays(p)]
    return out + [head.W, head.b]


def _setup(cfg: EncoderConfig, settings: TrainSettings, root: SeededRng):
    task = synth_task(root.child("data"), settings.n_samples, settings.seq_len, cfg.d, settings.n_classes)
    blocks = init_encoder(cfg, root.child("init"))
    g = root.child("head").generator()
    bound = math.sqrt(6 / (cfg.d + settings.n_classes))
    head = _Head(W=g.uniform(-bound, bound, size=(cfg.d, settings.n_classes)), b=np.zeros(settings.n_classes))
    return task, blocks, head


def check_toy_scale(cfg: EncoderConfig) -> None:
    if cfg.d > MAX_TRAIN_DIM or cfg.n_blocks > MAX_TRAIN_BLOCKS:
        raise ValueError(f"train is toy scale only: need d <= {MAX_TRAIN_DIM} and n_blocks <= {MAX_TRAIN_BLOCKS}, "
                         f"got d={cfg.d} n_blocks={cfg.n_blocks}")


def train(cfg: EncoderConfig, settings: TrainSettings = TrainSettings(), seed: int = 0) -> list[TrainRecord]:
    """Full-batch Adam on the synthetic task; one record per step.

    The loss recorded at step ``s`` is the loss before that step's update. A
    non-finite loss or gradient stops the run with a ``diverged`` record.
    """
    check_toy_scale(cfg)
    root = SeededRng(seed)
    task, blocks, head = _setup(cfg, settings, root)
    opt = _Adam(_flatten(blocks, head), settings)

    records = []
    for step in range(settings.steps):
        loss, g_blocks, g_head = _loss_and_grads(blocks, head, cfg, task, root.child(("step", step)))
        grads = _flatten(g_blocks, g_head)
        norm = math.sqrt(sum(float(np.sum(x * x)) for x in grads))
        if not (math.isfinite(loss) and math.isfinite(norm)):
            records.append(TrainRecord(step, loss, norm, settings.lr, status="diverged"))
            log.warning("training diverged at step %d (loss=%r)", step, loss)
            break
        records.append(TrainRecord(step, loss, norm, settings.lr))
        opt.step(grads, settings.lr)
    return records


def baseline_config(cfg: EncoderConfig) -> EncoderConfig:
    """Same stack with alpha pinned to 1 and no input LayerNorm."""
    return replace(cfg, norm_style="plain_postln")


def loss_reduction_passed(records: list[TrainRecord], factor: float = 0.2) -> bool:
    if not records or any(r.status != "ok" for r in records):
        return False
    return records[-1].loss < factor * records[0].loss


def depth_stability_report(cfg: EncoderConfig, seed: int = 0, settings: TrainSettings = TrainSettings()) -> dict:
    """Per-block gradient norms at init for the configured style and the plain post-LN baseline."""
    out = {}
    for label, c in (("deepnorm", cfg), ("baseline", baseline_config(cfg))):
        root = SeededRng(seed)
        task, blocks, head = _setup(c, settings, root)
        _, g_blocks, _ = _loss_and_grads(blocks, head, c, task, root.child(("step", 0)))
        norms = [math.sqrt(sum(float(np.sum(v * v)) for _, v in named_arrays(gb))) for gb in g_blocks]
        out[label] = {"block_grad_norms": norms, "first_over_last": norms[0] / norms[-1] if norms[-1] else math.inf}
    return out


def format_train_csv(runs: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAIN_COLUMNS)
    for name, records in runs.items():
        for r in records:
            w.writerow([name, r.step, repr(r.loss), repr(r.grad_norm), repr(r.lr), r.status])
    return buf.getvalue()


# -- complexity sweep -------------------------------------------------------


@dataclass(frozen=True)
class BenchPoint:
    L: int
    mode: str
    mac_count: int | None
    peak_elements: int | None
    wall_ns: int | None
    score_macs: int | None = None
    status: str = "ok"


def _bench_point(cfg: EncoderConfig, L: int, mode: str, repeats: int, rng: SeededRng) -> BenchPoint:
    acfg = replace(cfg.attention_config(), mode=mode, p_dropout=0.0)
    w = AttentionWeights.init(acfg, rng.child("weights"))
    X = rng.child("input").generator().normal(size=(1, L, cfg.d))
    XP = relpos_encoding(L, cfg.d)
    mask = PaddingMask.full(1, L)
    expect = flop_estimate(acfg, L)
    times = []
    counters = None
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        _, _, counters = attention_forward(X, XP, X, w, acfg, mask, rng.child("forward"))
        times.append(time.perf_counter_ns() - t0)
    if counters.mac_count != expect.mac_count or counters.peak_elements != expect.peak_elements:
        raise AssertionError(f"counter mismatch at L={L} {mode}: measured ({counters.mac_count}, "
                             f"{counters.peak_elements}) vs estimate ({expect.mac_count}, {expect.peak_elements})")
    return BenchPoint(L, mode, counters.mac_count, counters.peak_elements, int(np.median(times)),
                      counters.score_macs)


def bench(cfg: EncoderConfig, lengths, repeats: int = 3, modes=("dense", "sparse"), seed: int = 0) -> list[BenchPoint]:
    """Attention forward at each length and mode, counters checked against the closed form."""
    lengths = list(lengths)
    if lengths != sorted(lengths) or len(set(lengths)) != len(lengths):
        raise ValueError("lengths must be strictly ascending")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    root = SeededRng(seed)
    points = []
    for L in lengths:
        for mode in modes:
            try:
                points.append(_bench_point(cfg, L, mode, repeats, root.child(("bench", L, mode))))
            except MemoryError:
                log.warning("out of memory at L=%d mode=%s; point marked failed", L, mode)
                points.append(BenchPoint(L, mode, None, None, None, status="oom"))
    return sorted(points, key=lambda p: (p.L, p.mode))


def _blank(v):
    return "" if v is None else v


def format_bench_csv(points, with_timing: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for p in points:
        wall = _blank(p.wall_ns) if with_timing else ""
        w.writerow([p.L, p.mode, _blank(p.mac_count), _blank(p.peak_elements), wall])
    return buf.getvalue()


def bench_gates(points, sparse_ratio_max: float = 2.4, ratio_from: int = 1024, peak_from: int = 512) -> dict:
    """Growth-ratio and peak-memory checks over every doubling pair in the sweep."""
    ok = {(p.L, p.mode): p for p in points if p.status == "ok"}
    checks = []
    for (L, mode), p in sorted(ok.items()):
        q = ok.get((2 * L, mode))
        if q is not None:
            ratio = q.score_macs / p.score_macs
            if mode == "dense":
                checks.append({"gate": "dense_score_ratio", "L": L, "value": ratio, "passed": ratio == 4.0})
            elif L >= ratio_from:
                checks.append({"gate": "sparse_score_ratio", "L": L, "value": ratio,
                               "passed": ratio <= sparse_ratio_max})
        if mode == "sparse" and L >= peak_from and (L, "dense") in ok:
            d = ok[(L, "dense")]
            checks.append({"gate": "sparse_peak_below_dense", "L": L, "value": p.peak_elements / d.peak_elements,
                           "passed": p.peak_elements < d.peak_elements})
    failed_points = [asdict(p) for p in points if p.status != "ok"]
    return {"checks": checks, "failed_points": failed_points,
            "passed": bool(checks) and all(c["passed"] for c in checks) and not failed_points}
