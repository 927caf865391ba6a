"""``cloudmamba {make-synth|train|eval|predict|viz-stages|hard-subset}``.

Every command prints a JSON report on stdout.  Failures print one line,
``<ErrorClass>: <message>``, on stderr and exit with status 2.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import build_config
from .errors import CloudMambaError
from .refine import ThresholdConfig


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file with RunConfig keys")
    parser.add_argument("--preset", choices=["desk", "paper"])
    parser.add_argument("--seed", type=int)
    parser.add_argument("--deterministic", action="store_true", default=None)
    parser.add_argument("-v", "--verbose", action="store_true")


def _thresholds(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--gamma", type=float)
    parser.add_argument("--tau-c", type=float)
    parser.add_argument("--tau-r", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cloudmamba", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synth", help="write a synthetic cloud dataset")
    _common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=int, help="patch size in pixels")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)

    p = sub.add_parser("eval", help="coarse / refined / fused metrics on a split")
    _common(p)
    _thresholds(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", help="split tag, or 'all'")
    p.add_argument("--single-stage", action="store_true", help="drop the refiner")
    p.add_argument("--report", help="also write the report to this file")

    p = sub.add_parser("predict", help="masks and probability maps for one image")
    _common(p)
    _thresholds(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("viz-stages", help="nine-panel stage visualization")
    _common(p)
    _thresholds(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", help="ground-truth mask for panel (b)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("hard-subset", help="metrics on the most uncertain images")
    _common(p)
    _thresholds(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--fraction", type=float, default=0.10)
    return parser


def _threshold_override(args, checkpoint) -> ThresholdConfig | None:
    values = {"gamma": args.gamma, "tau_c": args.tau_c, "tau_r": args.tau_r}
    if all(v is None for v in values.values()):
        return None
    from .checkpoint import read_metadata

    base = read_metadata(checkpoint)["config"]["thresholds"]
    base.update({k: v for k, v in values.items() if v is not None})
    return ThresholdConfig(**base)


def run(args) -> dict:
    cmd = args.command
    if cmd == "make-synth":
        cfg = build_config(args.preset, args.config, seed=args.seed, patch_size=args.size)
        count = cfg.synth_count if args.count is None else args.count
        return pipeline.cmd_make_synth(cfg, count, args.out)
    if cmd == "train":
        cfg = build_config(args.preset, args.config, seed=args.seed, deterministic=args.deterministic,
                           data_dir=args.data, out_dir=args.out, epochs=args.epochs, lr=args.lr,
                           batch_size=args.batch_size)
        return pipeline.cmd_train(cfg)
    split = None if getattr(args, "split", None) == "all" else getattr(args, "split", None)
    thresholds = _threshold_override(args, args.checkpoint)
    if cmd == "eval":
        expected = build_config(args.preset, args.config) if (args.config or args.preset) else None
        report = pipeline.cmd_eval(args.checkpoint, args.data, thresholds, split, expected, args.single_stage)
        if args.report:
            Path(args.report).write_text(pipeline.dump(report) + "\n")
        return report
    if cmd == "predict":
        return pipeline.cmd_predict(args.checkpoint, args.image, args.out, thresholds)
    if cmd == "viz-stages":
        return pipeline.cmd_viz_stages(args.checkpoint, args.image, args.out, args.mask, thresholds)
    if cmd == "hard-subset":
        return pipeline.cmd_hard_subset(args.checkpoint, args.data, args.fraction, split, thresholds)
    raise AssertionError(cmd)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        report = run(args)
    except CloudMambaError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"IOError: {exc}", file=sys.stderr)
        return 2
    print(pipeline.dump(report))
    return 0


if __name__ == "__main__":
    sys.exit(main())
