"""Command implementations behind the ``cloudmamba`` CLI, usable from Python."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .checkpoint import load_checkpoint
from .config import RunConfig
from .data import load_dataset, make_synthetic_dataset, read_image, read_mask, write_gray16, write_mask
from .errors import DatasetError
from .metrics import hard_subset
from .refine import CloudMamba, ThresholdConfig, forward_full
from .train import EvalResult, evaluate, train
from .viz import render_stages


def cmd_make_synth(cfg: RunConfig, count: int, out_dir) -> dict:
    dataset = make_synthetic_dataset(out_dir, count, seed=cfg.seed, size=cfg.patch_size)
    splits = [item["split"] for item in dataset.items]
    return {"out_dir": str(out_dir), "count": len(dataset),
            "train": splits.count("train"), "test": splits.count("test")}


def cmd_train(cfg: RunConfig) -> dict:
    result = train(cfg)
    return {"out_dir": str(result.out_dir), "history": result.history}


def _load(checkpoint, expected: RunConfig | None, single_stage: bool) -> tuple[CloudMamba, RunConfig]:
    model, cfg = load_checkpoint(checkpoint, expected)
    if single_stage:
        model.refiner = None
    return model, cfg


def cmd_eval(checkpoint, data_dir, thresholds: ThresholdConfig | None = None, split: str | None = "test",
             expected: RunConfig | None = None, single_stage: bool = False) -> dict:
    """Coarse-only, refined-only and fused metrics side by side, plus the acceptance rate."""
    model, cfg = _load(checkpoint, expected, single_stage)
    thresholds = thresholds or cfg.thresholds
    dataset = load_dataset(data_dir, split)
    if len(dataset) == 0:
        raise DatasetError(f"split {split!r} of {data_dir} is empty")
    result = evaluate(model, dataset, thresholds, cfg.batch_size or 8)
    return {"dataset": str(data_dir), "split": split, "thresholds": vars(thresholds), **result.report()}


def _predict_array(model: CloudMamba, bands: np.ndarray, thresholds: ThresholdConfig):
    model.cfg.check_input(*bands.shape[:2])
    x = torch.from_numpy(np.ascontiguousarray(bands)).permute(2, 0, 1)[None].float()
    stages = forward_full(model, x, thresholds)
    return {name: getattr(stages, name)[0, 0].numpy() for name in
            ("coarse", "uncertainty", "accept", "refined", "coarse_mask", "refined_mask", "mask")}


def cmd_predict(checkpoint, image_path, out_dir, thresholds: ThresholdConfig | None = None) -> dict:
    """Write the fused, coarse and refined masks (8-bit) and P_c, P_r, U (16-bit)."""
    model, cfg = load_checkpoint(checkpoint)
    thresholds = thresholds or cfg.thresholds
    patch = read_image(image_path)
    maps = _predict_array(model, patch.bands, thresholds)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = patch.identifier
    files = {
        "mask": out_dir / f"{stem}_mask.png",
        "coarse_mask": out_dir / f"{stem}_coarse_mask.png",
        "refined_mask": out_dir / f"{stem}_refined_mask.png",
        "coarse": out_dir / f"{stem}_coarse_prob.png",
        "refined": out_dir / f"{stem}_refined_prob.png",
        "uncertainty": out_dir / f"{stem}_uncertainty.png",
    }
    for key in ("mask", "coarse_mask", "refined_mask"):
        write_mask(files[key], maps[key])
    for key in ("coarse", "refined", "uncertainty"):
        write_gray16(files[key], maps[key])
    return {key: str(path) for key, path in files.items()}


def cmd_viz_stages(checkpoint, image_path, out_file, mask_path=None,
                   thresholds: ThresholdConfig | None = None) -> dict:
    model, cfg = load_checkpoint(checkpoint)
    thresholds = thresholds or cfg.thresholds
    patch = read_image(image_path)
    maps = _predict_array(model, patch.bands, thresholds)
    truth = read_mask(mask_path) if mask_path else None
    canvas, boxes = render_stages(patch.bands, maps, truth)
    Path(out_file).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas).save(out_file)
    return {"out_file": str(out_file), "panels": list(boxes)}


def cmd_hard_subset(checkpoint, data_dir, fraction: float = 0.10, split: str | None = "test",
                    thresholds: ThresholdConfig | None = None) -> dict:
    """Rank images by mean U, keep the top fraction, compare coarse vs fused metrics there."""
    model, cfg = load_checkpoint(checkpoint)
    thresholds = thresholds or cfg.thresholds
    dataset = load_dataset(data_dir, split)
    if len(dataset) == 0:
        raise DatasetError(f"split {split!r} of {data_dir} is empty")
    full: EvalResult = evaluate(model, dataset, thresholds, cfg.batch_size or 8)
    chosen = hard_subset(full.mean_uncertainty, fraction)
    subset = full.subset(chosen)
    return {
        "fraction": fraction,
        "ids": subset.ids,
        "mean_uncertainty": [round(u, 6) for u in subset.mean_uncertainty],
        "full_mean_uncertainty": round(float(np.mean(full.mean_uncertainty)), 6),
        "subset": subset.report(),
    }


def dump(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=False)
