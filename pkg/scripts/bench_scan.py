#!/usr/bin/env python3
"""Wall time of the selective scan against sequence length (forward, and forward+backward).

    python3 scripts/bench_scan.py [--channels 64] [--state 8] [--repeats 5]
"""
from __future__ import annotations

import argparse
import statistics
import time

import torch

from cloudmamba import selective_scan


def median_time(fn, repeats: int) -> float:
    fn()  # compile / warm caches
    times = []
    for _ in range(repeats):
        started = time.perf_counter()
        fn()
        times.append(time.perf_counter() - started)
    return statistics.median(times)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--channels", type=int, default=64)
    parser.add_argument("--state", type=int, default=8)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--lengths", type=int, nargs="+", default=[1024, 2048, 4096, 8192, 16384, 32768])
    args = parser.parse_args()

    gen = torch.Generator().manual_seed(0)
    print(f"{'L':>7} {'fwd ms':>9} {'fwd+bwd ms':>11} {'ns/step/ch':>11}")
    for length in args.lengths:
        u = torch.randn(1, length, args.channels, generator=gen)
        delta = torch.nn.functional.softplus(torch.randn(1, length, args.channels, generator=gen) - 1)
        A = -torch.exp(torch.rand(args.channels, args.state, generator=gen))
        B = torch.randn(1, length, args.state, generator=gen)
        C = torch.randn(1, length, args.state, generator=gen)
        forward = median_time(lambda: selective_scan(u, delta, A, B, C), args.repeats)
        leaves = [t.clone().requires_grad_() for t in (u, delta, A, B, C)]
        both = median_time(lambda: selective_scan(*leaves).sum().backward(), args.repeats)
        print(f"{length:>7} {forward * 1e3:>9.1f} {both * 1e3:>11.1f} {forward * 1e9 / length / args.channels:>11.1f}")


if __name__ == "__main__":
    main()
