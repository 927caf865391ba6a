"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Criterion 7 trains the desk preset end to end and takes several minutes on
one CPU; criterion 8 reuses that run.
"""
import json
import math
import random
import statistics
import time
from fractions import Fraction

import numpy as np
import pytest
import torch

from cloudmamba.blocks import DSMamba, DSMambaConfig, HybridPerceptionBlock, MambaBlock, ResBlock
from cloudmamba.checkpoint import load_checkpoint
from cloudmamba.cli import main
from cloudmamba.config import build_config
from cloudmamba.data import load_dataset
from cloudmamba.losses import bce_loss, dice_loss, seg_loss
from cloudmamba.metrics import confusion_counts, f1, miou, oa
from cloudmamba.pipeline import cmd_eval, cmd_hard_subset, cmd_make_synth, cmd_train
from cloudmamba.refine import ThresholdConfig, acceptance_mask, forward_full, pipeline_from_probabilities, uncertainty_map
from cloudmamba.ssm import SS2D, cross_merge, cross_scan, selective_scan, selective_scan_reference, ss2d
from helpers import gradient_error, random_scan_inputs


# --- 1 -----------------------------------------------------------------------

def test_criterion_1_scan_oracle(record):
    rng = random.Random(1)
    started = time.perf_counter()
    worst = {torch.float32: 0.0, torch.float64: 0.0}
    for trial in range(100):
        length, channels, state = rng.randint(1, 256), rng.randint(1, 8), rng.randint(1, 16)
        height, width = rng.randint(1, 16), rng.randint(1, 16)
        batch = rng.randint(1, 2)
        for dtype in (torch.float32, torch.float64):
            gen = torch.Generator().manual_seed(trial)
            args = random_scan_inputs(gen, batch, length, channels, state, dtype=dtype)
            err = (selective_scan(*args) - selective_scan_reference(*args)).abs().max().item()

            torch.manual_seed(trial)
            module = SS2D(channels, state).to(dtype)
            feature = torch.randn(batch, height, width, channels, generator=gen, dtype=dtype)
            with torch.no_grad():
                fast = module(feature)
                slow = ss2d(feature, lambda s: module.s6(s, scan_fn=selective_scan_reference))
            worst[dtype] = max(worst[dtype], err, (fast - slow).abs().max().item())
    elapsed = time.perf_counter() - started
    passed = worst[torch.float32] <= 1e-5 and worst[torch.float64] <= 1e-10 and elapsed < 60
    record(1, passed, f"max err f32 {worst[torch.float32]:.2e} (<=1e-5), f64 {worst[torch.float64]:.2e} "
                      f"(<=1e-10), {elapsed:.1f}s (<60s)")
    assert passed


# --- 2 -----------------------------------------------------------------------

def test_criterion_2_cross_scan_algebra(record):
    seqs = cross_scan(torch.tensor([[1.0, 2.0], [3.0, 4.0]]).unsqueeze(-1))
    orderings = [seqs.direction(k)[:, 0].tolist() for k in range(4)]
    ordering_ok = orderings == [[1, 2, 3, 4], [1, 3, 2, 4], [4, 3, 2, 1], [4, 2, 3, 1]]
    gen = torch.Generator().manual_seed(2)
    identity_ok = True
    for height in range(1, 13):
        for width in range(1, 13):
            feature = torch.randint(-10 ** 6, 10 ** 6, (2, height, width, 3), generator=gen).double()
            identity_ok &= torch.equal(cross_merge(cross_scan(feature)), 4 * feature)
    record(2, ordering_ok and identity_ok, f"2x2 orderings {orderings}; merge(scan(F)) == 4F on 144 integer maps: {identity_ok}")
    assert ordering_ok and identity_ok


# --- 3 -----------------------------------------------------------------------

def _block_cases():
    """Yield (name, scalar fn, tensors) for the gradient check; one fixed draw each."""
    cases = {
        "DS-Mamba": lambda: DSMamba(DSMambaConfig(2)),
        "Mamba block": lambda: MambaBlock(2),
        "res_block": lambda: ResBlock(2),
        "HPB": lambda: HybridPerceptionBlock(2),
    }
    for name, make in cases.items():
        torch.manual_seed(3)
        block = make().double()
        x = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
        w = torch.randn(1, 2, 4, 4, dtype=torch.float64)
        yield name, (lambda b=block, x=x, w=w: (b(x) * w).sum()), [x, *block.parameters()]
    torch.manual_seed(3)
    p = (torch.rand(2, 1, 4, 4, dtype=torch.float64) * 0.8 + 0.1).requires_grad_()
    y = (torch.rand(2, 1, 4, 4) > 0.5).double()
    yield "seg_loss", (lambda: seg_loss(p, y)), [p]


def test_criterion_3_gradient_checks(record):
    # Known failure: with 2 channels a LayerNorm bends on a scale comparable to
    # h = 1e-3 near channel ties, so the stencil's truncation error, not the
    # gradient, exceeds the tolerance for HPB.  See the convergence test below.
    started = time.perf_counter()
    errors = {name: gradient_error(fn, tensors, h=1e-3) for name, fn, tensors in _block_cases()}
    elapsed = time.perf_counter() - started
    passed = max(errors.values()) <= 1e-3 and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    record(3, passed, f"relative FD error at h=1e-3 (<=1e-3): {detail}; {elapsed:.1f}s (<120s)")
    assert passed


def test_criterion_3_supplement_fd_error_vanishes_with_h():
    """Where h = 1e-3 is too coarse, the FD error must still fall toward zero as h shrinks."""
    for name, fn, tensors in _block_cases():
        errors = [gradient_error(fn, tensors, h=h) for h in (1e-3, 1e-4, 1e-5, 1e-6)]
        print(f"{name}: " + ", ".join(f"{e:.1e}" for e in errors))
        assert min(errors) <= 1e-5, name
        assert errors[-1] <= errors[0] or errors[0] <= 1e-5, name


# --- 4 -----------------------------------------------------------------------

def test_criterion_4_fusion_identities(record):
    started = time.perf_counter()
    gen = torch.Generator().manual_seed(4)
    maps = 10_000
    # a dyadic grid keeps every operation in U = 1 - 2|P - 0.5| exact and hits the boundaries
    p = torch.randint(0, 2 ** 12 + 1, (maps, 1, 4, 4), generator=gen).double() / 2 ** 12
    p[0] = 0.5
    p[1, ..., :2] = 0.0
    p[1, ..., 2:] = 1.0
    u = uncertainty_map(p)
    range_ok = bool(((u >= 0) & (u <= 1)).all())
    fixed_ok = bool((u[p == 0.5] == 1).all() and (u[(p == 0) | (p == 1)] == 0).all())

    gammas = torch.randint(1, 65, (maps, 1, 1, 1), generator=gen).double() / 64
    accept = (u < gammas)
    # U = 2 min(P, 1 - P), so U < gamma  <=>  |P - 0.5| > (1 - gamma) / 2  <=>  min(P, 1 - P) < gamma / 2
    algebra_ok = torch.equal(accept, (p - 0.5).abs() > (1 - gammas) / 2) and \
        torch.equal(accept, torch.minimum(p, 1 - p) < gammas / 2)

    refined = torch.rand(maps, 1, 4, 4, generator=gen, dtype=torch.float64)
    partition_ok = True
    monotone_ok = True
    previous = None
    for gamma in (0.1, 0.25, 0.4, 0.6, 0.9, 1.0):
        out = pipeline_from_probabilities(p, refined, ThresholdConfig(gamma=gamma))
        partition_ok &= torch.equal(out.mask * out.accept, out.coarse_mask * out.accept)
        partition_ok &= torch.equal(out.mask * (1 - out.accept), out.refined_mask * (1 - out.accept))
        if previous is not None:
            monotone_ok &= bool((previous <= out.accept).all())
        previous = out.accept
    elapsed = time.perf_counter() - started
    passed = range_ok and fixed_ok and algebra_ok and partition_ok and monotone_ok and elapsed < 10
    record(4, passed, f"range {range_ok}, fixed points {fixed_ok}, U<g <=> |P-0.5|>(1-g)/2 {algebra_ok}, "
                      f"partition {partition_ok}, gamma-monotone {monotone_ok} over {maps} maps; {elapsed:.2f}s (<10s)")
    assert passed


@pytest.mark.xfail(strict=True, reason="U < gamma <=> |P - 0.5| > gamma / 2 contradicts U = 1 - 2|P - 0.5|; "
                                       "the correct bound is (1 - gamma) / 2")
def test_criterion_4_literal_half_gamma_form(record):
    p = torch.tensor([0.75], dtype=torch.float64)
    lhs = bool(acceptance_mask(uncertainty_map(p), 0.4).item())
    rhs = bool(((p - 0.5).abs() > 0.2).item())
    record("4 (as literally stated, |P-0.5| > gamma/2)", lhs == rhs,
           f"counterexample P=0.75, gamma=0.4: U=0.5 so M=0, but |P-0.5|=0.25 > 0.2")
    assert lhs == rhs


# --- 5 -----------------------------------------------------------------------

def _set_oracle(pred: np.ndarray, label: np.ndarray):
    pixels = {(i, j) for i in range(pred.shape[0]) for j in range(pred.shape[1])}
    P = {ij for ij in pixels if pred[ij]}
    Y = {ij for ij in pixels if label[ij]}
    Pc, Yc = pixels - P, pixels - Y

    def iou(a, b):
        return Fraction(1) if not (a | b) else Fraction(len(a & b), len(a | b))

    score_miou = (iou(P, Y) + iou(Pc, Yc)) / 2
    score_f1 = Fraction(1) if not (P or Y) else Fraction(2 * len(P & Y), len(P) + len(Y))
    score_oa = Fraction(len(P & Y) + len(Pc & Yc), len(pixels))
    return score_miou, score_f1, score_oa


def test_criterion_5_metric_oracle(record):
    started = time.perf_counter()
    rng = np.random.default_rng(5)
    mismatches, dice_ok = 0, True
    for trial in range(1000):
        density_p, density_y = rng.random(2)
        pred = (rng.random((16, 16)) < density_p).astype(np.uint8)
        label = (rng.random((16, 16)) < density_y).astype(np.uint8)
        if trial % 50 == 0:
            pred[:] = 0; label[:] = 0  # noqa: E702  both classes absent from cloud
        elif trial % 50 == 1:
            pred[:] = 1; label[:] = 1  # noqa: E702
        elif trial % 50 == 2:
            pred[:] = 0
        c = confusion_counts(pred, label)
        got = (Fraction(miou(c)), Fraction(f1(c)), Fraction(oa(c)))
        want = _set_oracle(pred.astype(bool), label.astype(bool))
        # exact up to the correctly rounded float of each rational score
        mismatches += sum(abs(g - w) > Fraction(1, 2 ** 52) for g, w in zip(got, want))
        eps = 1e-3
        p_t, y_t = torch.from_numpy(pred).double()[None, None], torch.from_numpy(label).double()[None, None]
        total = float(pred.sum() + label.sum())
        if total:
            dice_ok &= abs((1 - dice_loss(p_t, y_t, eps).item()) - f1(c)) <= eps / total
    elapsed = time.perf_counter() - started
    passed = mismatches == 0 and dice_ok and elapsed < 10
    record(5, passed, f"{mismatches} mismatches vs set oracle over 1000 pairs; Dice-F1 bound {dice_ok}; {elapsed:.2f}s (<10s)")
    assert passed


# --- 6 -----------------------------------------------------------------------

def test_criterion_6_closed_form_losses(record):
    started = time.perf_counter()
    half = torch.full((1, 1, 2, 2), 0.5, dtype=torch.float64)
    ones = torch.ones(1, 1, 2, 2, dtype=torch.float64)
    bce = bce_loss(half, (torch.rand(1, 1, 2, 2) > 0.5).double()).item()
    y = (torch.rand(2, 1, 8, 8) > 0.5).double()
    dice_zero = dice_loss(y, y).item()
    composite = seg_loss(half, ones).item()
    elapsed = time.perf_counter() - started
    passed = abs(bce - math.log(2)) <= 1e-6 and dice_zero == 0.0 and abs(composite - 0.978861) <= 1e-5 and elapsed < 1
    record(6, passed, f"BCE(0.5)={bce:.6f} (ln2 +-1e-6), Dice(P=Y)={dice_zero}, composite={composite:.6f} "
                      f"(0.978861 +-1e-5); {elapsed * 1000:.0f}ms (<1s)")
    assert passed


# --- 7 and 8 -----------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    started = time.perf_counter()
    cfg = build_config("desk", seed=42, deterministic=True, data_dir=str(root / "data"), out_dir=str(root / "run"))
    cmd_make_synth(cfg, cfg.synth_count, cfg.data_dir)
    history = cmd_train(cfg)["history"]
    report = cmd_eval(root / "run" / "last.pt", cfg.data_dir, split="test")
    return {"cfg": cfg, "history": history, "report": report, "elapsed": time.perf_counter() - started,
            "checkpoint": root / "run" / "last.pt"}


@pytest.mark.slow
def test_criterion_7_end_to_end_smoke(record, desk_run):
    history, report = desk_run["history"], desk_run["report"]
    first, last = history[0]["train_loss"], history[-1]["train_loss"]
    fused = report["fused"]["miou"]
    passed = len(history) == 5 and last <= 0.5 * first and fused >= 0.80 and desk_run["elapsed"] < 600
    record(7, passed, f"train loss {first:.4f} -> {last:.4f} ({100 * (1 - last / first):.1f}% drop, >=50%), "
                      f"fused test mIoU {fused:.4f} (>=0.80), {desk_run['elapsed']:.0f}s (<600s)")
    assert passed


@pytest.mark.slow
def test_criterion_8_two_stage_mechanism(record, desk_run):
    cfg = desk_run["cfg"]
    hard = cmd_hard_subset(desk_run["checkpoint"], cfg.data_dir, 0.10, "test")
    model, run_cfg = load_checkpoint(desk_run["checkpoint"])
    test_set = load_dataset(cfg.data_dir, "test")
    lookup = {identifier: i for i, identifier in enumerate(test_set.ids)}
    local = True
    for identifier in hard["ids"]:
        bands, _, _ = test_set[lookup[identifier]]
        x = torch.from_numpy(bands).permute(2, 0, 1)[None]
        stages = forward_full(model, x, run_cfg.thresholds)
        changed = stages.mask != stages.coarse_mask
        local &= bool((stages.accept[changed] == 0).all())
    coarse, fused = hard["subset"]["coarse"]["miou"], hard["subset"]["fused"]["miou"]
    delta = fused - coarse
    sign = "+" if delta > 0 else ("-" if delta < 0 else "0")
    record(8, local, f"hard subset {hard['ids']} (mean U {hard['mean_uncertainty']} vs all {hard['full_mean_uncertainty']}); "
                     f"coarse mIoU {coarse:.4f}, fused {fused:.4f}, delta {delta:+.4f} (sign {sign}, reported only); "
                     f"fused differs from coarse only where M=0: {local}")
    assert local


# --- 9 -----------------------------------------------------------------------

def test_criterion_9_linear_complexity(record):
    gen = torch.Generator().manual_seed(9)

    def median_time(length):
        args = random_scan_inputs(gen, 1, length, 64, 8, dtype=torch.float32)
        selective_scan(*args)  # warm-up / JIT
        times = []
        for _ in range(5):
            started = time.perf_counter()
            selective_scan(*args)
            times.append(time.perf_counter() - started)
        return statistics.median(times)

    short, long = median_time(8192), median_time(16384)
    ratio = long / short
    record(9, ratio < 3, f"median time L=8192 {short * 1000:.1f}ms, L=16384 {long * 1000:.1f}ms, ratio {ratio:.2f} (<3)")
    assert ratio < 3


# --- 10 ----------------------------------------------------------------------

def test_criterion_10_determinism(record, tmp_path, capsys):
    config = tmp_path / "small.json"
    # the desk preset shrunk to a few seconds per run
    config.write_text(json.dumps({"synth_count": 16, "patch_size": 32, "epochs": 2,
                                  "model": {"levels": 2, "base_channels": 8}}))
    assert main(["make-synth", "--preset", "desk", "--config", str(config), "--seed", "42",
                 "--out", str(tmp_path / "data")]) == 0
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--preset", "desk", "--config", str(config), "--deterministic", "--seed", "42",
                     "--data", str(tmp_path / "data"), "--out", str(out)]) == 0
        runs.append(out)
    capsys.readouterr()
    same = {name: (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes()
            for name in ("last.pt", "best.pt", "train_log.jsonl")}
    hashes = [json.loads((run / "last.json").read_text())["sha256"] for run in runs]
    passed = all(same.values()) and hashes[0] == hashes[1]
    record(10, passed, f"bitwise identical across two --deterministic --seed 42 runs: {same}")
    assert passed
