#!/usr/bin/env python3
"""Desk-scale ablations: dilation sets, global block variants, one vs two stages.

    python3 scripts/ablation.py --study dilations --out runs/ablation [--epochs 5]

Every variant trains from the same synthetic dataset and seed; the table of
test-split metrics is printed and saved as results.json under --out.
Expect roughly 7 minutes per variant on one CPU core at the desk preset.
"""
from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path

from cloudmamba import build_config
from cloudmamba.pipeline import cmd_eval, cmd_make_synth, cmd_train

STUDIES = {
    "dilations": {f"d={d}": {"model": {"dilations": list(d)}}
                  for d in ((1, 1, 1), (2, 2, 2), (1, 2, 4), (2, 4, 8))},
    "global_block": {name: {"model": {"global_block": name}} for name in ("cnn", "mamba", "ds_sep", "ds")},
    "stages": {"single-stage": {"model": {"use_refiner": False}}, "two-stage": {}},
}


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--study", choices=sorted(STUDIES), required=True)
    parser.add_argument("--out", default="runs/ablation")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--config", help="JSON overrides on top of the desk preset")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out) / args.study
    base = build_config("desk", args.config, seed=args.seed, deterministic=True, epochs=args.epochs)
    data_dir = out / "data"
    cmd_make_synth(base, base.synth_count, data_dir)
    rows = {}
    for name, change in STUDIES[args.study].items():
        run_dir = out / name.replace("=", "_").replace(" ", "")
        cfg = build_config("desk", args.config, seed=args.seed, deterministic=True, epochs=args.epochs,
                           data_dir=str(data_dir), out_dir=str(run_dir), **change)
        cmd_train(cfg)
        report = cmd_eval(run_dir / "last.pt", data_dir)
        rows[name] = {stage: report[stage] for stage in ("coarse", "refined", "fused")}
        rows[name]["acceptance_rate"] = report["acceptance_rate"]
    (out / "results.json").write_text(json.dumps(rows, indent=2) + "\n")
    print(f"{'variant':<14} {'mIoU':>7} {'F1':>7} {'OA':>7}  (fused, test split)")
    for name, row in rows.items():
        fused = row["fused"]
        print(f"{name:<14} {fused['miou']:>7.4f} {fused['f1']:>7.4f} {fused['oa']:>7.4f}")


if __name__ == "__main__":
    main()
