"""``dsc`` command line: bench, gradcheck, equiv, train."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .checks import GRAD_TOL, PROBES, SUITES, equiv, gradcheck
from .conformer import EncoderConfig
from .harness import (
    TRAIN_DEFAULT_CONFIG,
    TrainSettings,
    baseline_config,
    bench,
    bench_gates,
    format_bench_csv,
    format_train_csv,
    loss_reduction_passed,
    train,
)

DEFAULT_LENGTHS = (64, 128, 256, 512, 1024, 2048, 4096)
# bench runs a single attention layer; keep the default sweep within a few GB
BENCH_DEFAULT_CONFIG = EncoderConfig(d=64, h=2)

# flag -> EncoderConfig field
_OVERRIDES = {"mode": "mode", "c1": "c1", "c2": "c2", "heads": "h", "dim": "d", "blocks": "n_blocks"}


def _lengths(text: str) -> list[int]:
    try:
        out = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad length list {text!r}") from None
    if not out or any(v < 1 for v in out):
        raise argparse.ArgumentTypeError("lengths must be positive integers")
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file with EncoderConfig fields")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", type=Path, help="output file (default: stdout)")
    common.add_argument("--mode", choices=("sparse", "dense"))
    common.add_argument("--c1", type=float)
    common.add_argument("--c2", type=float)
    common.add_argument("--heads", type=int)
    common.add_argument("--dim", type=int)
    common.add_argument("--blocks", type=int)
    common.add_argument("--verbose", action="store_true", help="log every block stage and its alpha")

    p = argparse.ArgumentParser(prog="dsc", description="Deep sparse Conformer numerics harness.")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", parents=[common], help="attention complexity sweep (CSV)")
    b.add_argument("--lengths", type=_lengths, default=list(DEFAULT_LENGTHS))
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--no-timing", action="store_true", help="leave wall_ns_median blank")

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suites (JSON)")
    g.add_argument("--suite", choices=(*SUITES, "all"), default="all")
    g.add_argument("--probe", choices=PROBES, default="random")

    e = sub.add_parser("equiv", parents=[common], help="sparse vs dense attention (JSON)")
    e.add_argument("--L-max", dest="L_max", type=int, default=64)
    e.add_argument("--n-seeds", type=int, default=10)

    t = sub.add_parser("train", parents=[common], help="toy training run (CSV loss curve)")
    t.add_argument("--steps", type=int, default=TrainSettings.steps)
    t.add_argument("--lr", type=float, default=TrainSettings.lr)
    t.add_argument("--no-baseline", action="store_true", help="skip the alpha=1 comparison run")
    return p


def resolve_config(args, base: EncoderConfig) -> EncoderConfig:
    """Subcommand default, then the config file, then explicit flags."""
    cfg = base
    if args.config is not None:
        cfg = EncoderConfig.from_dict({**asdict(cfg), **json.loads(args.config.read_text())})
    flags = {field: getattr(args, flag) for flag, field in _OVERRIDES.items() if getattr(args, flag) is not None}
    return replace(cfg, **flags) if flags else cfg


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def run_bench(args) -> bool:
    cfg = resolve_config(args, BENCH_DEFAULT_CONFIG)
    modes = (args.mode,) if args.mode else ("dense", "sparse")
    points = bench(cfg, args.lengths, args.repeats, modes=modes, seed=args.seed)
    _emit(format_bench_csv(points, with_timing=not args.no_timing), args.out)
    gates = bench_gates(points)
    for c in gates["checks"]:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['gate']} L={c['L']} value={c['value']!r}", file=sys.stderr)
    return gates["passed"]


def run_gradcheck(args) -> bool:
    report = gradcheck(args.suite, seed=args.seed, probe=args.probe, tol=GRAD_TOL)
    _emit(_dump(report), args.out)
    return report["passed"]


def run_equiv(args) -> bool:
    cfg = resolve_config(args, EncoderConfig(d=8, h=2))
    seeds = range(args.seed, args.seed + args.n_seeds)
    report = equiv(args.L_max, seeds, d=cfg.d, h=cfg.h, c2=args.c2)
    _emit(_dump(report), args.out)
    return report["passed"]


def run_train(args) -> bool:
    cfg = resolve_config(args, TRAIN_DEFAULT_CONFIG)
    settings = replace(TrainSettings(), steps=args.steps, lr=args.lr)
    runs = {"main": train(cfg, settings, args.seed)}
    if not args.no_baseline:
        runs["baseline"] = train(baseline_config(cfg), settings, args.seed)
    _emit(format_train_csv(runs), args.out)
    ok = loss_reduction_passed(runs["main"])
    main = runs["main"]
    print(f"{'PASS' if ok else 'FAIL'} loss {main[0].loss!r} -> {main[-1].loss!r} over {len(main)} steps",
          file=sys.stderr)
    return ok


COMMANDS = {"bench": run_bench, "gradcheck": run_gradcheck, "equiv": run_equiv, "train": run_train}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(name)s: %(message)s")
    if args.verbose:
        logging.getLogger("dsc.trace").setLevel(logging.DEBUG)
    try:
        ok = COMMANDS[args.command](args)
    except (ValueError, OSError) as exc:
        print(f"dsc {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
