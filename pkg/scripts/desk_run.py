#!/usr/bin/env python3
"""End-to-end desk run: synthesize data, train, evaluate, pick the hard subset.

    python3 scripts/desk_run.py --out runs/desk [--lr 1e-4] [--epochs 5]

Writes the dataset, checkpoints and train log under --out and prints the
evaluation and hard-subset reports as JSON.
"""
from __future__ import annotations

import argparse
import logging
import time
from pathlib import Path

from cloudmamba import build_config
from cloudmamba.pipeline import cmd_eval, cmd_hard_subset, cmd_make_synth, cmd_train, dump


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs/desk")
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--config", help="JSON overrides on top of the desk preset")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    cfg = build_config("desk", args.config, seed=args.seed, deterministic=True, lr=args.lr, epochs=args.epochs,
                       data_dir=str(out / "data"), out_dir=str(out / "train"))
    started = time.perf_counter()
    cmd_make_synth(cfg, cfg.synth_count, cfg.data_dir)
    history = cmd_train(cfg)["history"]
    report = cmd_eval(out / "train" / "last.pt", cfg.data_dir)
    hard = cmd_hard_subset(out / "train" / "last.pt", cfg.data_dir, 0.10)
    first, last = history[0]["train_loss"], history[-1]["train_loss"]
    print(dump({"loss_drop": round(1 - last / first, 4), "eval": report, "hard_subset": hard,
                "seconds": round(time.perf_counter() - started, 1)}))


if __name__ == "__main__":
    main()
