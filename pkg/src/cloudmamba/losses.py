"""BCE-Dice segmentation objective with deep supervision."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import ConfigError, ShapeError

PROB_CLAMP = 1e-7


@dataclass
class LossConfig:
    lambda_bce: float = 1.0
    lambda_dice: float = 1.0
    eps: float = 1.0
    # alpha_l for l = 1..L; None means 2 ** -(l - 1)
    ds_weights: list[float] | None = None
    supervise_refined: bool = True

    def __post_init__(self):
        if self.lambda_bce < 0 or self.lambda_dice < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.eps <= 0:
            raise ConfigError("Dice smoothing eps must be positive")
        if self.ds_weights is not None:
            self.ds_weights = [float(a) for a in self.ds_weights]
            if any(a < 0 for a in self.ds_weights):
                raise ConfigError("deep-supervision weights must be non-negative")

    def alphas(self, levels: int) -> list[float]:
        if self.ds_weights is None:
            return [2.0 ** -(l - 1) for l in range(1, levels + 1)]
        if len(self.ds_weights) != levels:
            raise ConfigError(f"need {levels} deep-supervision weights, got {len(self.ds_weights)}")
        return list(self.ds_weights)


def _match(prob: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    if prob.shape != label.shape:
        raise ShapeError(f"prediction {tuple(prob.shape)} and label {tuple(label.shape)} differ")
    return label.to(prob.dtype)


def bce_loss(prob: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """Mean pixel-wise binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    label = _match(prob, label)
    p = prob.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    return -(label * torch.log(p) + (1 - label) * torch.log(1 - p)).mean()


def dice_loss(prob: torch.Tensor, label: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """1 - (2 sum(PY) + eps) / (sum(P) + sum(Y) + eps), per image over the last two axes, then averaged."""
    label = _match(prob, label)
    inter = (prob * label).sum(dim=(-2, -1))
    total = prob.sum(dim=(-2, -1)) + label.sum(dim=(-2, -1))
    return (1 - (2 * inter + eps) / (total + eps)).mean()


def seg_loss(prob: torch.Tensor, label: torch.Tensor, cfg: LossConfig | None = None) -> torch.Tensor:
    cfg = cfg or LossConfig()
    return cfg.lambda_bce * bce_loss(prob, label) + cfg.lambda_dice * dice_loss(prob, label, cfg.eps)


def downsample_nearest(label: torch.Tensor, factor: int) -> torch.Tensor:
    """Keep the top-left pixel of every factor x factor block."""
    return label[..., ::factor, ::factor]


def deep_supervision_terms(aux: list[torch.Tensor], label: torch.Tensor,
                           cfg: LossConfig | None = None) -> list[torch.Tensor]:
    """alpha_l * seg_loss(P^l, Y^l) for every level, finest first."""
    cfg = cfg or LossConfig()
    terms = []
    for level, (prob, alpha) in enumerate(zip(aux, cfg.alphas(len(aux))), start=1):
        target = downsample_nearest(label, 2 ** (level - 1))
        if target.shape != prob.shape:
            raise ShapeError(f"aux map {level} has shape {tuple(prob.shape)}, label downsamples to {tuple(target.shape)}")
        terms.append(alpha * seg_loss(prob, target, cfg))
    return terms


def deep_supervision_loss(aux: list[torch.Tensor], label: torch.Tensor,
                          cfg: LossConfig | None = None) -> torch.Tensor:
    terms = deep_supervision_terms(aux, label, cfg)
    return torch.stack(terms).sum() if terms else label.new_zeros((), dtype=torch.float32)


def loss_terms(output, label: torch.Tensor, cfg: LossConfig | None = None) -> dict[str, torch.Tensor]:
    """Named components of the total objective, in evaluation order.

    ``output`` is anything with ``coarse``, ``aux`` and ``refined`` attributes
    (``refined`` may be None for a single-stage model).
    """
    cfg = cfg or LossConfig()
    terms = {"seg_coarse": seg_loss(output.coarse, label, cfg)}
    if cfg.supervise_refined and output.refined is not None:
        terms["seg_refined"] = seg_loss(output.refined, label, cfg)
    for level, term in enumerate(deep_supervision_terms(output.aux, label, cfg), start=1):
        terms[f"deep_supervision_{level}"] = term
    return terms


def total_loss(output, label: torch.Tensor, cfg: LossConfig | None = None) -> torch.Tensor:
    return torch.stack(list(loss_terms(output, label, cfg).values())).sum()
