"""``sadc`` command line: infer, train, bench, flops, metrics, synth."""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_UNKNOWN_FLAG = 2
EXIT_MISSING_FLAG = 3
EXIT_UNREADABLE = 4
EXIT_INVALID = 5

EXIT_CODES_HELP = """exit codes:
  0  success
  1  runtime failure (e.g. training diverged)
  2  unknown flag or subcommand
  3  missing required flag
  4  unreadable or missing input path (image, mask, checkpoint, dataset)
  5  invalid flag value
environment:
  SADC_THREADS  default for --threads (BLAS threads; reports record the value)
"""


class UsageError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        if "the following arguments are required" in message or "one of the arguments" in message:
            code = EXIT_MISSING_FLAG
        elif message.startswith("unrecognized arguments") or message.startswith("argument command"):
            code = EXIT_UNKNOWN_FLAG
        else:
            code = EXIT_INVALID
        raise UsageError(code, f"{self.prog}: {message}")


def _unit_interval(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {text}")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _odd_int(text: str) -> int:
    v = _positive_int(text)
    if v % 2 == 0:
        raise argparse.ArgumentTypeError(f"must be odd, got {text}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def _default_threads() -> int:
    env = os.environ.get("SADC_THREADS")
    try:
        return _positive_int(env) if env else 1
    except (ValueError, argparse.ArgumentTypeError):
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sadc", description="Shadow-aware dynamic convolution toolkit.",
                     epilog=EXIT_CODES_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--threads", type=_positive_int, default=_default_threads(),
                        help="BLAS thread count (default: $SADC_THREADS or 1)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help_):
        return sub.add_parser(name, help=help_, description=help_, epilog=EXIT_CODES_HELP,
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    p = add("infer", "Remove shadows from one image with a trained checkpoint.")
    p.add_argument("--input", required=True, help="shadow image (8-bit RGB PNG)")
    p.add_argument("--mask", required=True, help="shadow mask PNG (pixel >= --threshold is shadow)")
    p.add_argument("--checkpoint", required=True, help="checkpoint written by `train`")
    p.add_argument("--output", required=True, help="output PNG path")
    p.add_argument("--phase", choices=("test", "train"), default="test",
                   help="sparse (test) or whole-map (train) block evaluation")
    p.add_argument("--fashion", type=int, choices=(1, 2), default=1, help="train-input mode the net was trained with")
    p.add_argument("--threshold", type=int, default=128, help="mask binarisation threshold (0-255)")

    p = add("train", "Train a network and write a checkpoint and a JSON-lines loss log.")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="dataset root with shadow/mask/free subfolders")
    src.add_argument("--synth-seed", type=int, help="train on synthetic triplets generated from this seed")
    p.add_argument("--folders", nargs=3, default=("A", "B", "C"), metavar=("SHADOW", "MASK", "FREE"),
                   help="subfolder names under --data (default: A B C)")
    p.add_argument("--synth-n", type=_positive_int, default=256, help="synthetic triplet count")
    p.add_argument("--size", type=_positive_int, default=64, help="synthetic image size")
    p.add_argument("--epochs", type=_positive_int, default=300)
    p.add_argument("--batch-size", type=_positive_int, default=5)
    p.add_argument("--lr", type=_positive_float, default=2e-4)
    p.add_argument("--lr-schedule", choices=("constant", "cosine"), default="constant",
                   help="learning-rate schedule over epochs")
    p.add_argument("--schedule", choices=("constant", "warmup-constant", "warmup-ramp"), default="warmup-ramp",
                   help="distillation weight schedule")
    p.add_argument("--warmup-epochs", type=int, default=50)
    p.add_argument("--fashion", type=int, choices=(1, 2), default=1,
                   help="1: branches see the whole map, 2: each branch sees only its region")
    p.add_argument("--arm", choices=("sadc", "shared-conv", "naive-split"), default="sadc")
    p.add_argument("--no-intra", action="store_true", help="drop the distillation term")
    p.add_argument("--kappa", type=_odd_int, default=7, help="boundary ring kernel size")
    p.add_argument("--channels", type=_positive_int, default=16)
    p.add_argument("--blocks", type=_positive_int, default=3)
    p.add_argument("--crop", type=_positive_int, default=None, help="random square crop size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-checkpoint", required=True, help="checkpoint output path")
    p.add_argument("--log", required=True, help="JSON-lines loss log output path")

    p = add("bench", "Time one dense conv against one sparse SADC block.")
    p.add_argument("--rho", type=_unit_interval, required=True, help="non-shadow area fraction")
    p.add_argument("--c", type=_positive_int, default=64)
    p.add_argument("--h", type=_positive_int, default=256)
    p.add_argument("--w", type=_positive_int, default=256)
    p.add_argument("--k", type=_odd_int, default=3)
    p.add_argument("--reps", type=_positive_int, default=30)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--json", action="store_true", help="emit the full JSON report")

    p = add("flops", "Analytic MAC counts and reduction rate.")
    p.add_argument("--rho", type=_unit_interval, required=True, help="non-shadow area fraction")
    p.add_argument("--c", type=_positive_int, required=True)
    p.add_argument("--h", type=_positive_int, required=True)
    p.add_argument("--w", type=_positive_int, required=True)
    p.add_argument("--k", type=_odd_int, required=True)
    p.add_argument("--halo", action="store_true", help="charge the first dense conv on the dilated shadow area")
    p.add_argument("--halo-fraction", type=_unit_interval, default=None,
                   help="dilated shadow area fraction (default: disc estimate)")

    p = add("metrics", "Region LAB RMSE, PSNR and SSIM of a prediction.")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--threshold", type=int, default=128)
    p.add_argument("--json", action="store_true", help="emit JSON (default: one line per region)")

    p = add("synth", "Write a synthetic dataset in the shadow/mask/free folder layout.")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_positive_int, default=64)
    p.add_argument("--rho-target", type=_unit_interval, default=None, help="non-shadow area fraction")
    p.add_argument("--shape", choices=("ellipse", "polygon", "mixed"), default="mixed")
    p.add_argument("--texture", choices=("smooth", "stripes"), default="smooth")
    return parser


def _unknown_flags(parser: argparse.ArgumentParser, argv) -> list[str]:
    # argparse reports missing required flags before unknown ones; unknown flags take precedence here
    argv = list(sys.argv[1:] if argv is None else argv)
    known = set(parser._option_string_actions)
    sub = None
    for tok in argv:
        if not tok.startswith("-") and sub is None:
            sub = parser._subparsers._group_actions[0].choices.get(tok)
            if sub is not None:
                known |= set(sub._option_string_actions)
    return [tok.split("=", 1)[0] for tok in argv
            if tok.startswith("--") and tok.split("=", 1)[0] not in known]


def _readable(path: str, what: str, is_dir: bool = False) -> Path:
    p = Path(path)
    ok = p.is_dir() if is_dir else p.is_file()
    if not ok or not os.access(p, os.R_OK):
        raise UsageError(EXIT_UNREADABLE, f"cannot read {what}: {path}")
    return p


def _writable_parent(path: str, what: str) -> Path:
    p = Path(path)
    parent = p.parent if str(p.parent) else Path(".")
    if not parent.is_dir():
        raise UsageError(EXIT_UNREADABLE, f"directory for {what} does not exist: {parent}")
    return p


def _validate(args) -> None:
    if args.command == "infer":
        _readable(args.input, "input image")
        _readable(args.mask, "mask")
        _readable(args.checkpoint, "checkpoint")
        _writable_parent(args.output, "output")
        if not 0 <= args.threshold <= 255:
            raise UsageError(EXIT_INVALID, "--threshold must lie in [0, 255]")
    elif args.command == "train":
        if args.data is not None:
            _readable(args.data, "dataset root", is_dir=True)
        if not 0 <= args.warmup_epochs < args.epochs and args.schedule != "constant":
            raise UsageError(EXIT_INVALID, "--warmup-epochs must lie in [0, --epochs)")
        _writable_parent(args.out_checkpoint, "checkpoint")
        _writable_parent(args.log, "log")
    elif args.command == "bench":
        if args.warmup < 0:
            raise UsageError(EXIT_INVALID, "--warmup must be >= 0")
    elif args.command == "flops":
        if args.halo_fraction is not None and args.halo_fraction < 1 - args.rho:
            raise UsageError(EXIT_INVALID, "--halo-fraction must be >= 1 - rho")
    elif args.command == "metrics":
        for flag in ("pred", "gt", "mask"):
            _readable(getattr(args, flag), f"--{flag}")
        if not 0 <= args.threshold <= 255:
            raise UsageError(EXIT_INVALID, "--threshold must lie in [0, 255]")


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _cmd_infer(args) -> None:
    from .checkpoint import load_checkpoint
    from .dataio import load_image, load_mask, save_image
    from .trainer import FASHIONS, predict

    image, m = load_image(args.input), load_mask(args.mask, args.threshold)
    if m.shape != image.shape[1:]:
        raise ValueError(f"mask {m.shape} and image {image.shape[1:]} differ in size")
    net = load_checkpoint(args.checkpoint, input_mode=FASHIONS[args.fashion])
    save_image(predict(net, image, m, args.phase), args.output)
    _emit({"output": str(args.output), "phase": args.phase, "shadow_fraction": float(m.mean())})


def _cmd_train(args) -> None:
    from .checkpoint import save_checkpoint
    from .dataio import SynthConfig, scan_istd, synth_triplets
    from .trainer import TrainConfig, evaluate, fit

    config = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, lr_schedule=args.lr_schedule,
                         kappa=args.kappa, schedule=args.schedule, warmup_epochs=args.warmup_epochs,
                         fashion=args.fashion, arm=args.arm, use_intra=not args.no_intra, channels=args.channels,
                         n_blocks=args.blocks, seed=args.seed, crop=args.crop, threads=args.threads)
    if args.data is not None:
        scan = scan_istd(args.data, tuple(args.folders))
        if not scan.triplets:
            raise ValueError(f"no complete triplets under {args.data}")
        data = [t.load() for t in scan.triplets]
        skipped = scan.skipped
    else:
        data = synth_triplets(SynthConfig(seed=args.synth_seed, size=args.size), args.synth_n)
        skipped = []
    with open(args.log, "w", encoding="utf-8") as log:
        net, history = fit(config, data, log)
    save_checkpoint(net, args.out_checkpoint)
    report = evaluate(net, data)
    _emit({"epochs": len(history), "final_loss": history[-1]["loss"], "skipped": skipped,
           "train_report": json.loads(report.to_json()), "checkpoint": str(args.out_checkpoint),
           "threads": args.threads})


def _cmd_bench(args) -> None:
    from .perf import BenchConfig, benchmark

    report = benchmark(BenchConfig(rho=args.rho, C=args.c, H=args.h, W=args.w, K=args.k, reps=args.reps,
                                   warmup=args.warmup, threads=args.threads))
    if args.json:
        print(report.to_json())
    else:
        print(f"dense {report.dense_ms['p50']:.2f} ms  sadc {report.sadc_ms['p50']:.2f} ms  "
              f"speedup {report.speedup:.2f}x  threads {report.threads}"
              + ("" if report.reliable else "  (unreliable)"))


def _cmd_flops(args) -> None:
    from .perf import flops_model

    report = flops_model(args.rho, args.c, args.h, args.w, args.k, args.halo, args.halo_fraction)
    _emit(report.to_dict())


def _cmd_metrics(args) -> None:
    from .dataio import load_image, load_mask
    from .metrics import REGIONS, region_report

    pred, gt, m = load_image(args.pred), load_image(args.gt), load_mask(args.mask, args.threshold)
    if pred.shape != gt.shape or m.shape != pred.shape[1:]:
        raise ValueError(f"size mismatch: pred {pred.shape}, gt {gt.shape}, mask {m.shape}")
    report = region_report(pred, gt, m)
    if args.json:
        print(report.to_json())
    else:
        for region in REGIONS:
            v = report[region]
            print(f"{region:<10} rmse {v['rmse']:.4f}  psnr {v['psnr']:.4f}  ssim {v['ssim']:.4f}")


def _cmd_synth(args) -> None:
    from .dataio import SynthConfig, synth_triplets, write_istd

    config = SynthConfig(seed=args.seed, size=args.size, shape_family=args.shape, texture=args.texture,
                         rho_target=args.rho_target)
    triplets = synth_triplets(config, args.n)
    write_istd(triplets, args.out)
    _emit({"out": str(args.out), "n": len(triplets), "seed": args.seed,
           "rho": [round(float(1 - t.mask.mean()), 6) for t in triplets]})


COMMANDS = {"infer": _cmd_infer, "train": _cmd_train, "bench": _cmd_bench, "flops": _cmd_flops,
            "metrics": _cmd_metrics, "synth": _cmd_synth}


def run(argv=None) -> int:
    """Parse ``argv``, run the command, return the exit code; diagnostics go to stderr."""
    from .checkpoint import CheckpointError
    from .dataio import DatasetLayoutError, ImageIOError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _validate(args)
    except UsageError as exc:
        unknown = _unknown_flags(parser, argv) if exc.code == EXIT_MISSING_FLAG else []
        if unknown:
            print(f"sadc: unrecognized arguments: {' '.join(unknown)}", file=sys.stderr)
            return EXIT_UNKNOWN_FLAG
        print(str(exc), file=sys.stderr)
        return exc.code
    try:
        with threadpool_limits(limits=args.threads):
            COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code
    except (ImageIOError, CheckpointError, DatasetLayoutError, FileNotFoundError) as exc:
        print(f"sadc {args.command}: {exc}", file=sys.stderr)
        return EXIT_UNREADABLE
    except FloatingPointError as exc:
        print(f"sadc {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"sadc {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - the CLI reports every failure as one line
        print(f"sadc {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
