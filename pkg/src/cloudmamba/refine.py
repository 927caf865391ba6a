"""Stage two: uncertainty estimation, refinement decoder and mask fusion."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DomainError, ShapeError
from .net import BaseSegmentationNet, Decoder, ModelConfig, StageOneOutput


@dataclass
class ThresholdConfig:
    gamma: float = 0.4
    tau_c: float = 0.5
    tau_r: float = 0.5

    def __post_init__(self):
        # gamma = 1 is allowed: it accepts every pixel except P_c = 0.5 exactly
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        for name in ("tau_c", "tau_r"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigError(f"{name} must lie strictly inside (0, 1), got {value}")


def _check_unit_range(x: torch.Tensor, name: str) -> None:
    if not bool(((x >= 0) & (x <= 1)).all()):
        raise DomainError(f"{name} has values outside [0, 1]")


def _check_binary(x: torch.Tensor, name: str) -> None:
    if not bool(((x == 0) | (x == 1)).all()):
        raise DomainError(f"{name} is not binary")


def uncertainty_map(coarse: torch.Tensor) -> torch.Tensor:
    """U = 1 - 2|P_c - 0.5|: 1 on the decision boundary, 0 at confident pixels."""
    _check_unit_range(coarse, "P_c")
    return 1.0 - 2.0 * (coarse - 0.5).abs()


def acceptance_mask(uncertainty: torch.Tensor, gamma: float) -> torch.Tensor:
    """1 where the stage-one prediction is kept (U < gamma, strict)."""
    return (uncertainty < gamma).to(uncertainty.dtype)


def binarize(prob: torch.Tensor, tau: float) -> torch.Tensor:
    return (prob > tau).to(prob.dtype)


def fuse_masks(accept: torch.Tensor, coarse_mask: torch.Tensor, refined_mask: torch.Tensor) -> torch.Tensor:
    """Per-pixel select: coarse mask where ``accept`` is 1, refined mask elsewhere."""
    if not accept.shape == coarse_mask.shape == refined_mask.shape:
        raise ShapeError("fusion inputs must share one shape")
    for t, name in ((accept, "M"), (coarse_mask, "Y_c"), (refined_mask, "Y_r")):
        _check_binary(t, name)
    return accept * coarse_mask + (1 - accept) * refined_mask


def resize(x: torch.Tensor, size) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


def modulate(features: torch.Tensor, uncertainty: torch.Tensor) -> torch.Tensor:
    """Scale an NCHW map by U resized to its resolution, broadcast over channels.

    U acts as a fixed gain: no gradient flows back into stage one through it.
    """
    gain = resize(uncertainty.detach(), features.shape[-2:])
    return features * gain


class DecoderAggregator(nn.Module):
    """Bilinearly resize every decoder level to the bottleneck resolution, concat, 1x1 conv."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        total = sum(cfg.channels(l - 1) for l in range(1, cfg.levels + 1))
        self.reduce = nn.Conv2d(total, cfg.channels(cfg.levels), 1)

    def forward(self, features: list[torch.Tensor], size) -> torch.Tensor:
        if not features:
            raise ShapeError("no decoder features to aggregate")
        return self.reduce(torch.cat([resize(f, size) for f in features], dim=1))


class Refiner(nn.Module):
    """Independently parameterized copy of the stage-one decoder plus a P_r head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.aggregator = DecoderAggregator(cfg)
        self.decoder = Decoder(cfg)
        self.head = nn.Conv2d(cfg.channels(0), 1, 1)

    def forward(self, stage_one: StageOneOutput, uncertainty: torch.Tensor) -> torch.Tensor:
        pyramid = stage_one.pyramid
        aggregated = self.aggregator(stage_one.decoder_features, pyramid.bottleneck.shape[-2:])
        skips = [modulate(s, uncertainty) for s in pyramid.skips]
        features = self.decoder(modulate(aggregated, uncertainty), skips)
        return torch.sigmoid(self.head(features[0]))


@dataclass
class ModelOutput:
    coarse: torch.Tensor
    aux: list[torch.Tensor]
    refined: torch.Tensor | None
    uncertainty: torch.Tensor


class CloudMamba(nn.Module):
    """Base segmentation network followed by the uncertainty-guided refiner.

    With ``cfg.use_refiner`` off this is the single-stage model.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.base = BaseSegmentationNet(cfg)
        self.refiner = Refiner(cfg) if cfg.use_refiner else None

    def forward(self, image: torch.Tensor) -> ModelOutput:
        stage_one = self.base(image)
        u = uncertainty_map(stage_one.coarse.detach())
        refined = self.refiner(stage_one, u) if self.refiner is not None else None
        return ModelOutput(stage_one.coarse, stage_one.aux, refined, u)


@dataclass
class StagePipelineOutput:
    """All (batch, 1, H, W) maps of one inference pass.

    Without a refiner, ``refined`` mirrors ``coarse`` and M plays no role.
    """

    coarse: torch.Tensor  # P_c
    uncertainty: torch.Tensor  # U
    accept: torch.Tensor  # M
    refined: torch.Tensor  # P_r
    coarse_mask: torch.Tensor  # Y_c
    refined_mask: torch.Tensor  # Y_r
    mask: torch.Tensor  # fused Y


def pipeline_from_probabilities(coarse: torch.Tensor, refined: torch.Tensor | None,
                                thresholds: ThresholdConfig) -> StagePipelineOutput:
    u = uncertainty_map(coarse)
    accept = acceptance_mask(u, thresholds.gamma)
    coarse_mask = binarize(coarse, thresholds.tau_c)
    if refined is None:
        refined, refined_mask = coarse, coarse_mask
    else:
        refined_mask = binarize(refined, thresholds.tau_r)
    return StagePipelineOutput(coarse, u, accept, refined, coarse_mask, refined_mask,
                               fuse_masks(accept, coarse_mask, refined_mask))


@torch.no_grad()
def forward_full(model: CloudMamba, image: torch.Tensor,
                 thresholds: ThresholdConfig | None = None) -> StagePipelineOutput:
    thresholds = thresholds or ThresholdConfig()
    out = model(image)
    return pipeline_from_probabilities(out.coarse, out.refined, thresholds)
