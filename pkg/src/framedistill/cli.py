"""Command-line entry point: synthgen, pretrain, probe, sweep-stride, plot."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from . import pipeline
from .config import PRESETS, default_output_root, load_config
from .errors import CheckpointError, ConfigError, DivergenceError, FrameDistillError

EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_FAILED = 1


def _parse_set(values) -> dict:
    out = {}
    for item in values or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError([f"--set {item!r}: expected key=value"])
        out[key.strip()] = yaml.safe_load(raw)
    return out


def _config(args, **flags):
    overrides = _parse_set(getattr(args, "set", None))
    overrides.update({k: v for k, v in flags.items() if v is not None})
    return load_config(args.config, overrides, preset=args.preset)


def _add_common(p):
    p.add_argument("--config", type=Path, help="flat YAML run config")
    p.add_argument("--preset", choices=sorted(PRESETS), default="default")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--seed", type=int)


def cmd_synthgen(args) -> int:
    cfg = _config(args, synth_seed=args.seed, synth_frames=args.frames)
    out = Path(args.out or cfg.data.out_dir or default_output_root() / "synth")
    try:
        manifest = pipeline.synthgen(cfg, out)
    except OSError as exc:
        print(f"error: cannot write synthetic video to {out}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_FAILED
    print(manifest)
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(
        args,
        seed=args.seed,
        loss_mode=args.loss_mode,
        baseline_mode=args.baseline_mode,
        time_aug_delta=args.time_aug_delta,
        stride=args.stride,
        epochs=args.epochs,
    )
    data = args.data or cfg.data.data_dir
    if not data:
        raise ConfigError(["data_dir: no data directory given (--data or data_dir)"])
    pipeline.resolve_data(data)
    out = Path(args.out or cfg.data.out_dir or default_output_root() / f"pretrain_{cfg.hash()}")
    try:
        res = pipeline.pretrain(cfg, data, out, resume=args.resume)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc} (diagnostics in {out / 'divergence.json'})", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"checkpoint: {res.checkpoint}")
    print(f"metrics: {res.metrics}")
    print(f"config_hash: {cfg.hash()}")
    return 0


def cmd_probe(args) -> int:
    cfg = _config(args, probe_seed=args.seed)
    if args.checkpoint and args.config is None:
        # Reuse the encoder settings the checkpoint was trained with.
        from .trainer import read_checkpoint

        stored = read_checkpoint(args.checkpoint).get("config") or {}
        if stored:
            cfg = load_config(None, {**stored, **_parse_set(args.set)}, preset="default")
    if not args.checkpoint and not args.random_baseline:
        raise CheckpointError("--checkpoint is required unless --random-baseline is given")
    data = args.data or cfg.data.probe_data_dir or cfg.data.data_dir
    if not data:
        raise ConfigError(["probe_data_dir: no probe data directory given (--data)"])
    report = Path(args.out) if args.out else Path(args.checkpoint or ".").parent.parent / (
        "probe_random.txt" if args.random_baseline else "probe_report.txt"
    )
    run = pipeline.run_probe(
        cfg,
        data,
        checkpoint=args.checkpoint,
        random_baseline=args.random_baseline,
        report_path=report,
        label_dir=args.labels or cfg.data.probe_label_dir or None,
    )
    print(f"miou: {run.result.miou:.4f}")
    print(f"report: {run.report}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args, seed=args.seed)
    try:
        deltas = [int(x) for x in args.deltas.split(",") if x.strip()]
    except ValueError:
        raise ConfigError([f"--deltas: expected comma-separated integers, got {args.deltas!r}"]) from None
    data = args.data or cfg.data.data_dir
    if not data:
        raise ConfigError(["data_dir: no data directory given (--data or data_dir)"])
    out = Path(args.out or default_output_root() / f"sweep_{cfg.hash()}")
    try:
        csv_path, png = pipeline.sweep_stride(cfg, deltas, data, out, parallel=args.parallel)
    except ValueError as exc:
        raise ConfigError([f"--deltas: {exc}"]) from exc
    print(f"sweep: {csv_path}")
    print(f"plot: {png}")
    return 0


def cmd_plot(args) -> int:
    src = Path(args.csv)
    out = Path(args.out) if args.out else src.with_suffix(".png")
    with src.open() as fh:
        header = next(ln for ln in fh if not ln.startswith("#"))
    if header.startswith("delta"):
        pipeline.plot_sweep(src, out)
    else:
        pipeline.plot_metrics(src, out)
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="framedistill", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthgen", help="render a synthetic moving-shapes video with labels")
    _add_common(p)
    p.add_argument("--out", type=Path)
    p.add_argument("--frames", type=int)
    p.set_defaults(func=cmd_synthgen)

    p = sub.add_parser("pretrain", help="next-frame self-distillation pretraining")
    _add_common(p)
    p.add_argument("--data", type=Path, help="frame directory or synthgen output")
    p.add_argument("--out", type=Path)
    p.add_argument("--loss-mode", choices=("both", "dense_only", "global_only"))
    p.add_argument("--baseline-mode", choices=("ours", "dino_frames", "dino_precrop", "time_aug"))
    p.add_argument("--time-aug-delta", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="fast linear probe on frozen teacher features")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--labels", type=Path)
    p.add_argument("--out", type=Path, help="report path")
    p.add_argument("--random-baseline", action="store_true", help="probe a randomly initialised teacher")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("sweep-stride", help="pretrain + probe for several strides")
    _add_common(p)
    p.add_argument("--deltas", required=True, help="comma-separated strides, e.g. 1,5,15,30")
    p.add_argument("--data", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--parallel", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="plot a metrics or sweep CSV")
    p.add_argument("csv", type=Path)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except FrameDistillError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
