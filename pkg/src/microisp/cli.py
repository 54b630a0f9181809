"""Command-line entry point: ``microisp {train,infer,eval,gradcheck,bench,synth}``.

Exit codes: 0 success, 1 usage error, 2 runtime failure. All file outputs are
written to a temporary file and renamed into place on success.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import MicroISPError
from .executor import benchmark, build_plan, execute
from .imaging import load_pairs, load_packed, save_raw, synthesize_bayer, write_rgb
from .metrics import evaluate_dataset
from .model import (ATTENTION_VARIANTS, ACTIVATION_VARIANTS, DEPTH_TO_BLOCKS, ModelConfig,
                    atomic_write, build_model, load_weights, save_weights)
from .training import (DESK_SCHEDULE, SCHEDULE_KEYS_HELP, format_history, gradcheck,
                       load_schedule, train_loop)

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        prog = self.prog
        print(f"{prog}: error: {message} (see '{prog} --help')", file=sys.stderr)
        sys.exit(1)


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _resolution(text):
    try:
        w, h = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, e.g. 1920x1080, got {text!r}") from None
    if w <= 0 or h <= 0 or w % 2 or h % 2:
        raise argparse.ArgumentTypeError(f"width and height must be even and positive, got {text}")
    return w, h


def _model_flags(p):
    p.add_argument("--multiplier", type=float, default=1.0, choices=sorted(DEPTH_TO_BLOCKS),
                   help="depth multiplier for a freshly built model (default 1.0)")
    p.add_argument("--attention", default="enhanced", choices=ATTENTION_VARIANTS,
                   help="attention variant for a freshly built model")
    p.add_argument("--activation", default="prelu", choices=ACTIVATION_VARIANTS,
                   help="activation variant for a freshly built model")


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    shared.add_argument("--threads", type=_positive_int, default=1,
                        help="maximum worker threads; results do not depend on it (default 1)")
    shared.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="microisp", description="Train and run the MicroISP RAW-to-RGB network.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[shared], help="train a model",
                       description="Train on a directory of <stem>.braw|.pgm + <stem>.ppm pairs.",
                       epilog=SCHEDULE_KEYS_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--data", required=True, help="training pair directory")
    p.add_argument("--schedule", help="schedule file (default: built-in desk-scale schedule)")
    p.add_argument("--out", required=True, help="output weight file (.misp); the per-epoch "
                   "history goes to <out>.history.tsv")
    p.add_argument("--resume", help="start from these weights instead of a fresh model")
    p.add_argument("--max-iterations", type=_positive_int, help="stop after this many updates")
    _model_flags(p)

    p = sub.add_parser("infer", parents=[shared], help="run a model on one RAW file")
    p.add_argument("--weights", required=True, help="weight file")
    p.add_argument("--input", required=True, help="RAW input (.braw or 16-bit .pgm)")
    p.add_argument("--output", required=True, help="output PPM")
    p.add_argument("--branch-mode", choices=("sequential", "parallel"), default="sequential",
                   help="run the color branches one after another or concurrently")
    p.add_argument("--report-mem", action="store_true",
                   help="print the planned peak activation memory")
    p.add_argument("--depth", type=int, choices=(8, 16), default=8, help="output bits per sample")

    p = sub.add_parser("eval", parents=[shared], help="PSNR/SSIM over a pair directory")
    p.add_argument("--weights", required=True, help="weight file")
    p.add_argument("--data", required=True, help="evaluation pair directory")
    p.add_argument("--report", help="write the report here instead of stdout")
    p.add_argument("--branch-mode", choices=("sequential", "parallel"), default="sequential")

    p = sub.add_parser("gradcheck", parents=[shared],
                       help="compare analytic gradients with finite differences")
    p.add_argument("--depth", type=float, default=0.25, choices=sorted(DEPTH_TO_BLOCKS),
                   help="depth multiplier of the model to check (default 0.25)")
    p.add_argument("--tolerance", type=float, default=1e-4, help="max relative error (default 1e-4)")
    p.add_argument("--size", type=_positive_int, default=16, help="packed input size (default 16)")
    p.add_argument("--attention", default="enhanced", choices=ATTENTION_VARIANTS)
    p.add_argument("--activation", default="prelu", choices=ACTIVATION_VARIANTS)

    p = sub.add_parser("bench", parents=[shared], help="time planned inference")
    p.add_argument("--weights", help="weight file (default: fresh model from --multiplier)")
    p.add_argument("--resolution", type=_resolution, default=(1920, 1080),
                   help="RAW resolution WxH (default 1920x1080)")
    p.add_argument("--mode", choices=("sequential", "parallel"), default="sequential")
    p.add_argument("--reps", type=_positive_int, default=3, help="timed repetitions (default 3)")
    p.add_argument("--report", help="write the per-layer report here instead of stdout")
    _model_flags(p)

    p = sub.add_parser("synth", parents=[shared], help="write synthetic RAW/RGB training pairs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=_positive_int, default=8, help="number of pairs (default 8)")
    p.add_argument("--size", type=int, default=64, help="RAW/target side length, even >= 32")
    p.add_argument("--noise-sigma", type=float, default=0.005, help="sensor noise std (default 0.005)")
    return parser


def _fresh_model(args):
    return build_model(ModelConfig(args.multiplier, args.attention, args.activation), args.seed)


def _cmd_train(args):
    pairs, skipped = load_pairs(args.data)
    for name in skipped:
        print(f"skipped (no counterpart): {name}", file=sys.stderr)
    schedule = load_schedule(args.schedule) if args.schedule else DESK_SCHEDULE
    schedule = replace(schedule, seed=args.seed)
    model = load_weights(args.resume) if args.resume else _fresh_model(args)
    model, history = train_loop(model, pairs, schedule, threads=args.threads,
                                max_iterations=args.max_iterations)
    out = Path(args.out)
    save_weights(model, out)
    atomic_write(out.with_name(out.name + ".history.tsv"), format_history(history).encode())
    if history:
        print(f"trained {len(history)} epochs; final loss {history[-1].loss:.6g}, "
              f"psnr {history[-1].psnr:.2f} dB -> {out}")


def _cmd_infer(args):
    model = load_weights(args.weights)
    packed = load_packed(args.input)
    plan = build_plan(model, packed.shape[:2], args.branch_mode)
    rgb = execute(plan, model, packed, threads=args.threads)
    write_rgb(rgb, args.output, args.depth)
    if args.report_mem:
        print(f"planned peak activation memory: {plan.peak_bytes} bytes "
              f"({plan.peak_bytes / 2**20:.1f} MiB, {len(plan.buffers)} buffers, "
              f"{args.branch_mode})")


def _cmd_eval(args):
    model = load_weights(args.weights)
    report = evaluate_dataset(model, args.data, args.branch_mode, args.threads)
    text = report.to_text()
    if args.report:
        atomic_write(args.report, text.encode())
        print(text.splitlines()[-1])
    else:
        sys.stdout.write(text)


def _cmd_gradcheck(args):
    config = ModelConfig(args.depth, args.attention, args.activation)
    report = gradcheck(config, args.tolerance, size=args.size, seed=args.seed)
    sys.stdout.write(report.to_text())
    return 0 if report.passed else 2


def _cmd_bench(args):
    model = load_weights(args.weights) if args.weights else _fresh_model(args)
    w, h = args.resolution
    report = benchmark(model, (h // 2, w // 2), args.mode, args.reps, args.threads, args.seed)
    text = report.to_text()
    if args.report:
        atomic_write(args.report, text.encode())
    else:
        sys.stdout.write(text)
    print(f"{w}x{h} {args.mode}: median {report.median_wall_time * 1e3:.1f} ms over "
          f"{args.reps} runs, planned peak {report.peak_bytes / 2**20:.1f} MiB, "
          f"measured {report.measured_peak_bytes / 2**20:.1f} MiB", file=sys.stderr)


def _cmd_synth(args):
    if args.size < 32 or args.size % 2:
        raise UsageError(f"--size must be even and >= 32, got {args.size}")
    if args.noise_sigma < 0:
        raise UsageError("--noise-sigma must be >= 0")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(args.seed).generate_state(args.count)
    for i, s in enumerate(seeds):
        raw, target = synthesize_bayer(int(s), (args.size, args.size), args.noise_sigma)
        save_raw(raw, out / f"synth_{i:04d}.braw")
        write_rgb(target, out / f"synth_{i:04d}.ppm", 16)
    print(f"wrote {args.count} pairs to {out}")


COMMANDS = {
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "bench": _cmd_bench,
    "synth": _cmd_synth,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args) or 0
    except UsageError as e:
        print(f"microisp {args.command}: error: {e} (see 'microisp {args.command} --help')",
              file=sys.stderr)
        return 1
    except (MicroISPError, OSError) as e:
        print(f"microisp {args.command}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
