"""Training loop and dataset evaluation."""
from __future__ import annotations

import json
import logging
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import PatchDataset, augment, load_dataset
from .errors import ConfigError, DatasetError, NonFiniteLossError
from .losses import loss_terms
from .metrics import ConfusionCounts, confusion_counts
from .refine import CloudMamba, ThresholdConfig, pipeline_from_probabilities

log = logging.getLogger(__name__)


def cosine_lr(epoch: int, epochs: int, lr: float, lr_min: float) -> float:
    """Learning rate for 0-based ``epoch``: lr_min + (lr - lr_min)(1 + cos(pi k / K)) / 2."""
    return lr_min + 0.5 * (lr - lr_min) * (1 + math.cos(math.pi * epoch / epochs))


def seed_everything(seed: int, deterministic: bool) -> None:
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def to_tensors(images: list[np.ndarray], masks: list[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous().float()
    y = torch.from_numpy(np.stack(masks)).unsqueeze(1).float()
    return x, y


@dataclass
class EvalResult:
    coarse: ConfusionCounts = field(default_factory=ConfusionCounts)
    refined: ConfusionCounts = field(default_factory=ConfusionCounts)
    fused: ConfusionCounts = field(default_factory=ConfusionCounts)
    accepted: int = 0
    pixels: int = 0
    ids: list[str] = field(default_factory=list)
    mean_uncertainty: list[float] = field(default_factory=list)
    per_image: list[dict[str, ConfusionCounts]] = field(default_factory=list)

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.pixels if self.pixels else 0.0

    def subset(self, indices: list[int]) -> "EvalResult":
        out = EvalResult()
        for i in indices:
            counts = self.per_image[i]
            out.coarse += counts["coarse"]
            out.refined += counts["refined"]
            out.fused += counts["fused"]
            out.accepted += counts["accepted"]
            out.pixels += counts["coarse"].total
            out.ids.append(self.ids[i])
            out.mean_uncertainty.append(self.mean_uncertainty[i])
            out.per_image.append(counts)
        return out

    def report(self) -> dict:
        return {
            "images": len(self.ids),
            "coarse": metrics.report(self.coarse),
            "refined": metrics.report(self.refined),
            "fused": metrics.report(self.fused),
            "acceptance_rate": round(self.acceptance_rate, 4),
            "mean_uncertainty": round(float(np.mean(self.mean_uncertainty)), 4) if self.mean_uncertainty else None,
        }


@torch.no_grad()
def evaluate(model: CloudMamba, dataset: PatchDataset, thresholds: ThresholdConfig,
             batch_size: int = 8) -> EvalResult:
    """Coarse, refined and fused confusion counts over a dataset, plus per-image mean U."""
    was_training = model.training
    model.eval()
    result = EvalResult()
    for start in range(0, len(dataset), batch_size):
        batch = [dataset[i] for i in range(start, min(start + batch_size, len(dataset)))]
        x, _ = to_tensors([b[0] for b in batch], [b[1] for b in batch])
        out = model(x)
        stages = pipeline_from_probabilities(out.coarse, out.refined, thresholds)
        for j, (_, mask, identifier) in enumerate(batch):
            counts = {
                "coarse": confusion_counts(stages.coarse_mask[j, 0].numpy(), mask),
                "refined": confusion_counts(stages.refined_mask[j, 0].numpy(), mask),
                "fused": confusion_counts(stages.mask[j, 0].numpy(), mask),
                "accepted": int(stages.accept[j].sum()),
            }
            result.coarse += counts["coarse"]
            result.refined += counts["refined"]
            result.fused += counts["fused"]
            result.accepted += counts["accepted"]
            result.pixels += mask.size
            result.ids.append(identifier)
            result.mean_uncertainty.append(float(stages.uncertainty[j].mean()))
            result.per_image.append(counts)
    model.train(was_training)
    return result


def _checked_loss(terms: dict[str, torch.Tensor], epoch: int, step: int) -> torch.Tensor:
    for name, value in terms.items():
        if not torch.isfinite(value):
            raise NonFiniteLossError(f"non-finite loss term {name} at epoch {epoch}, step {step}")
    return torch.stack(list(terms.values())).sum()


@dataclass
class TrainResult:
    model: CloudMamba
    history: list[dict]
    out_dir: Path


def train(cfg: RunConfig, dataset: PatchDataset | None = None) -> TrainResult:
    """Optimize the total loss with AdamW and a per-epoch cosine schedule.

    Writes ``last.pt``/``best.pt`` checkpoints (with JSON sidecars) and a
    newline-delimited ``train_log.jsonl`` into ``cfg.out_dir``.
    """
    if cfg.batch_size is None:
        raise ConfigError("batch_size must be set (the paper preset leaves it to the user)")
    if dataset is None:
        if cfg.data_dir is None:
            raise ConfigError("no dataset: set data_dir")
        dataset = load_dataset(cfg.data_dir)
    train_set, val_set = dataset.split("train"), dataset.split("test")
    if len(train_set) == 0:
        raise DatasetError("the dataset has no items tagged 'train'")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    log_path.write_text("")
    cfg.save(out_dir / "config.json")

    seed_everything(cfg.seed, cfg.deterministic)
    model = CloudMamba(cfg.model)
    model.train()
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    # small datasets are held in memory; iteration order is the manifest order
    samples = [train_set[i] for i in range(len(train_set))]
    for bands, _, identifier in samples:
        cfg.model.check_input(*bands.shape[:2])
    rng = np.random.default_rng(cfg.seed)
    history, best = [], -1.0
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.lr_min)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = np.arange(len(samples)) if cfg.deterministic else rng.permutation(len(samples))
        started, losses = time.perf_counter(), []
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            images, masks = [], []
            for index in order[start:start + cfg.batch_size]:
                bands, mask, _ = samples[index]
                if cfg.augment:
                    bands, mask = augment(bands, mask, seed=(cfg.seed, epoch, int(index)))
                images.append(bands)
                masks.append(mask)
            x, y = to_tensors(images, masks)
            loss = _checked_loss(loss_terms(model(x), y, cfg.loss), epoch + 1, step)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(loss.item() * len(images))
        record = {"epoch": epoch + 1, "lr": lr, "train_loss": sum(losses) / len(samples)}
        if len(val_set):
            scores = evaluate(model, val_set, cfg.thresholds, cfg.batch_size).fused
            record.update(val_miou=metrics.miou(scores), val_f1=metrics.f1(scores), val_oa=metrics.oa(scores))
        history.append(record)
        with log_path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")
        log.info("epoch %d/%d loss %.4f val mIoU %s (%.1fs)", epoch + 1, cfg.epochs, record["train_loss"],
                 record.get("val_miou"), time.perf_counter() - started)
        save_checkpoint(out_dir / "last.pt", model, cfg, epoch=epoch + 1, record=record)
        score = record.get("val_miou", -record["train_loss"])
        if score > best:
            best = score
            save_checkpoint(out_dir / "best.pt", model, cfg, epoch=epoch + 1, record=record)
    return TrainResult(model, history, out_dir)
