"""``edgeseg`` command line: profile, synth, train, eval, bench, gradcheck.

Exit status: 0 success, 1 invalid arguments, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .bench import BenchConfig, run_bench
from .dataio import load_manifest, synthesize_dataset
from .gradcheck import run_gradcheck
from .models import KIND_ALIASES, ModelConfig, build_model, init_weights
from .profiler import profile_model
from .tensor import ShapeError
from .train import AdamWConfig, TrainData, evaluate, save_checkpoint, train
from .weightfile import load_weights

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
MODEL_CHOICES = ("unet", "umbv2", "umbv3")


class UsageError(Exception):
    """Bad flag value discovered after parsing; carries the offending flag."""

    def __init__(self, flag: str, message: str, parser: argparse.ArgumentParser):
        super().__init__(f"{flag}: {message}")
        self.parser = parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _non_negative_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def _non_negative_float(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def _widths(text: str) -> tuple[int, ...]:
    try:
        widths = tuple(int(w) for w in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if any(w < 1 for w in widths):
        raise argparse.ArgumentTypeError(f"widths must be positive, got {text!r}")
    return widths


def _add_model_flags(p: argparse.ArgumentParser, classes: bool = True) -> None:
    p.add_argument("--model", required=True, choices=MODEL_CHOICES, help="architecture")
    if classes:
        p.add_argument("--classes", type=_positive_int, default=9, help="number of classes K (default 9)")
    p.add_argument("--base", type=_positive_int, default=64, help="UNet-baseline first-level width (default 64)")
    p.add_argument("--depth", type=_positive_int, default=4, help="UNet-baseline pooling levels (default 4)")
    p.add_argument(
        "--decoder-widths", type=_widths, default=None, metavar="a,b,...",
        help="decoder widths, deepest level first (one per decoder level)",
    )


def _model_config(args, parser, num_classes: Optional[int] = None) -> ModelConfig:
    try:
        return ModelConfig(
            kind=KIND_ALIASES[args.model],
            num_classes=num_classes if num_classes is not None else args.classes,
            base_channels=args.base,
            depth=args.depth,
            decoder_widths=args.decoder_widths,
        )
    except ValueError as exc:
        flag = "--decoder-widths" if "decoder" in str(exc) else "--classes"
        raise UsageError(flag, str(exc), parser) from None


def _check_size(cfg: ModelConfig, size: int, flag: str, parser) -> None:
    if size % cfg.divisor:
        raise UsageError(flag, f"{size} is not divisible by {cfg.divisor} as {cfg.kind} requires", parser)


def _emit(doc: dict, path: Optional[str], timestamps: bool) -> None:
    if timestamps:
        doc = {**doc, "created": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
    text = json.dumps(doc, indent=2) + "\n"
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="edgeseg", description="Edge semantic segmentation toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("profile", help="parameter / MAC / CIO accounting")
    _add_model_flags(p)
    p.add_argument("--input", type=_positive_int, required=True, metavar="S", help="square input side in pixels")
    p.add_argument("--per-layer", action="store_true", help="also print the per-layer table")
    p.add_argument("--json", metavar="PATH", help="write the JSON report here (default: stdout)")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("synth", help="write a synthetic shapes dataset")
    p.add_argument("--n", type=_positive_int, default=50, help="number of samples (default 50)")
    p.add_argument("--size", type=_positive_int, default=32, help="image side, a multiple of 32 (default 32)")
    p.add_argument("--classes", type=_positive_int, default=3, help="number of classes incl. background (default 3)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--out", required=True, metavar="DIR", help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a manifest with AdamW")
    p.add_argument("--manifest", required=True, metavar="PATH", help="dataset manifest JSON")
    _add_model_flags(p, classes=False)
    length = p.add_mutually_exclusive_group(required=True)
    length.add_argument("--steps", type=_positive_int, help="number of optimizer steps")
    length.add_argument("--epochs", type=_positive_int, help="number of full passes")
    p.add_argument("--lr", type=_positive_float, default=0.001, help="learning rate (default 0.001)")
    p.add_argument("--wd", type=_non_negative_float, default=0.0001, help="decoupled weight decay (default 0.0001)")
    p.add_argument("--batch", type=_positive_int, default=4, help="batch size (default 4)")
    p.add_argument("--clip-norm", type=_positive_float, default=None, help="global gradient-norm clip (default off)")
    p.add_argument("--seed", type=int, default=0, help="init and shuffle seed (default 0)")
    p.add_argument("--out", default="weights.esw", metavar="WEIGHTS", help="weight file (default weights.esw)")
    p.add_argument("--log", default="metrics.csv", metavar="CSV", help="per-epoch metrics CSV (default metrics.csv)")
    p.add_argument("--no-timestamps", action="store_true", help="zero wall-clock fields for byte-identical reruns")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="eval-mode metrics of saved weights on a manifest")
    p.add_argument("--manifest", required=True, metavar="PATH", help="dataset manifest JSON")
    p.add_argument("--weights", required=True, metavar="PATH", help="weight file written by train")
    p.add_argument("--json", metavar="PATH", help="write the JSON report here (default: stdout)")
    p.add_argument("--no-timestamps", action="store_true", help="omit the creation time from the report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="latency / throughput benchmark")
    _add_model_flags(p)
    p.add_argument("--weights", metavar="PATH", help="weight file (default: seeded random init)")
    p.add_argument("--input", type=_positive_int, default=256, metavar="S", help="square input side (default 256)")
    p.add_argument("--frames", type=_positive_int, default=1000, help="frames per round (default 1000)")
    p.add_argument("--rounds", type=_positive_int, default=20, help="timed rounds (default 20)")
    p.add_argument("--warmup", type=_non_negative_int, default=20, help="untimed warmup frames (default 20)")
    p.add_argument("--power-watts", type=_positive_float, default=None, help="externally measured average power")
    p.add_argument("--threads", type=_positive_int, default=None, help="BLAS thread limit (default: library default)")
    p.add_argument("--seed", type=int, default=0, help="seed for init and the static input (default 0)")
    p.add_argument("--json", metavar="PATH", help="write the JSON report here (default: stdout)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--target", choices=("ops", "blocks", "model"), default="ops", help="what to check (default ops)")
    p.add_argument("--tolerance", type=_positive_float, default=1e-4, help="max relative error (default 1e-4)")
    p.add_argument("--coords", type=_positive_int, default=50, help="sampled coordinates per check (default 50)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--json", metavar="PATH", help="also write the JSON report here")
    p.set_defaults(func=cmd_gradcheck)
    return parser


# ----------------------------------------------------------------- commands


def cmd_profile(args, parser) -> int:
    cfg = _model_config(args, parser)
    _check_size(cfg, args.input, "--input", parser)
    report = profile_model(cfg, args.input)
    print(report.table(per_layer=args.per_layer))
    _emit(report.to_dict(), args.json, timestamps=False)
    return EXIT_OK


def cmd_synth(args, parser) -> int:
    if args.size % 32:
        raise UsageError("--size", f"must be a multiple of 32, got {args.size}", parser)
    if args.classes < 2:
        raise UsageError("--classes", f"need at least 2 classes, got {args.classes}", parser)
    try:
        path = synthesize_dataset(args.n, args.size, args.classes, args.seed, args.out)
    except ValueError as exc:
        raise UsageError("--classes", str(exc), parser) from None
    print(f"wrote {args.n} samples (seed {args.seed}) and {path}")
    return EXIT_OK


def cmd_train(args, parser) -> int:
    manifest = load_manifest(args.manifest)
    cfg = _model_config(args, parser, num_classes=manifest.classes.K)
    data = TrainData.from_samples(manifest.load_all(), manifest.classes)
    _check_size(cfg, data.images.shape[2], "--manifest", parser)
    opt = AdamWConfig(lr=args.lr, weight_decay=args.wd)
    model = init_weights(build_model(cfg), args.seed)
    print(f"training {cfg.kind} on {len(data)} samples, seed {args.seed}")
    logs, state = train(
        model, data, opt, steps=args.steps, epochs=args.epochs, batch_size=args.batch, seed=args.seed,
        log_csv=args.log, clip_norm=args.clip_norm, timestamps=not args.no_timestamps,
    )
    save_checkpoint(model, args.out, state, opt, epoch=len(logs))
    last = logs[-1]
    print(f"epoch {last.epoch}: loss {last.loss:.4f}, pixel acc {last.pixel_acc:.4f}, mIoU {last.miou:.4f}")
    print(f"weights -> {args.out}, log -> {args.log}")
    return EXIT_OK


def cmd_eval(args, parser) -> int:
    sidecar = Path(args.weights + ".json")
    if not sidecar.is_file():
        raise FileNotFoundError(f"{sidecar}: checkpoint sidecar not found (written next to the weights by train)")
    cfg = ModelConfig.from_dict(json.loads(sidecar.read_text())["config"])
    manifest = load_manifest(args.manifest)
    if manifest.classes.K != cfg.num_classes:
        raise UsageError("--manifest", f"has {manifest.classes.K} classes, weights expect {cfg.num_classes}", parser)
    model = build_model(cfg)
    _load_into(model, args.weights)
    data = TrainData.from_samples(manifest.load_all(), manifest.classes)
    report = evaluate(model, data)
    print(report.table())
    _emit({**report.to_dict(), "weights": Path(args.weights).name}, args.json, timestamps=not args.no_timestamps)
    return EXIT_OK


def _load_into(model, path: str) -> None:
    loaded = load_weights(path)
    missing = sorted(set(model.weights) - set(loaded))
    if missing:
        raise ValueError(f"{path}: missing tensors, e.g. {missing[:3]}")
    for name, arr in loaded.items():
        if name not in model.weights:
            raise ValueError(f"{path}: unexpected tensor {name!r}")
        if arr.shape != model.weights[name].shape:
            raise ValueError(f"{path}: {name} has shape {arr.shape}, model expects {model.weights[name].shape}")
        model.weights[name] = arr


def cmd_bench(args, parser) -> int:
    cfg = _model_config(args, parser)
    _check_size(cfg, args.input, "--input", parser)
    bench_cfg = BenchConfig(
        frames_per_round=args.frames, rounds=args.rounds, warmup_frames=args.warmup,
        input_shape=(1, cfg.input_channels, args.input, args.input),
        power_watts=args.power_watts, threads=args.threads, seed=args.seed,
    )
    model = build_model(cfg)
    if args.weights:
        _load_into(model, args.weights)
    else:
        init_weights(model, args.seed)
    report = run_bench(model, bench_cfg)
    print(report.table())
    _emit(report.to_dict(), args.json, timestamps=True)
    return EXIT_OK


def cmd_gradcheck(args, parser) -> int:
    reports = run_gradcheck(args.target, args.tolerance, args.seed, args.coords)
    for r in reports:
        print("\n".join(r.lines()))
    ok = all(r.passed for r in reports)
    print(f"{'PASS' if ok else 'FAIL'}: {args.target}, seed {args.seed}, h=1e-5, tolerance {args.tolerance:g}")
    if args.json:
        doc = {"target": args.target, "seed": args.seed, "passed": ok, "checks": [r.to_dict() for r in reports]}
        _emit(doc, args.json, timestamps=False)
    return EXIT_OK if ok else EXIT_RUNTIME


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    if extra:
        sub.error(f"unrecognized arguments: {' '.join(extra)}")
    try:
        return args.func(args, sub)
    except UsageError as exc:
        exc.parser.print_usage(sys.stderr)
        print(f"{exc.parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, ShapeError, RuntimeError, FloatingPointError, KeyError) as exc:
        print(f"edgeseg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
