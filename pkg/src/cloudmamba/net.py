"""Stage one: the encoder-decoder base segmentation network."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .blocks import GLOBAL_BLOCKS, HybridPerceptionBlock, ResBlock
from .errors import ConfigError, ShapeError


@dataclass
class ModelConfig:
    levels: int = 5
    base_channels: int = 16
    max_channels: int = 256
    state_dim: int = 8
    in_channels: int = 4
    dilations: tuple[int, int, int] = (1, 2, 4)
    global_block: str = "ds"
    use_refiner: bool = True

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.base_channels < 1 or self.max_channels < self.base_channels:
            raise ConfigError("need 1 <= base_channels <= max_channels")
        if self.state_dim < 1:
            raise ConfigError("state_dim must be >= 1")
        if self.global_block not in GLOBAL_BLOCKS:
            raise ConfigError(f"global_block must be one of {GLOBAL_BLOCKS}")

    def channels(self, level: int) -> int:
        """Width of F^level: min(C0 * 2**level, C_max)."""
        return min(self.base_channels * 2 ** level, self.max_channels)

    @property
    def multiple(self) -> int:
        return 2 ** self.levels

    def check_input(self, height: int, width: int) -> None:
        if height % self.multiple or width % self.multiple:
            raise ConfigError(
                f"input {height}x{width} is not divisible by 2**levels = {self.multiple}"
            )


@dataclass
class FeaturePyramid:
    """skips[l-1] is S^l (pre-downsampling HPB output at H / 2**(l-1)); bottleneck is F^L."""

    skips: list[torch.Tensor]
    bottleneck: torch.Tensor


@dataclass
class StageOneOutput:
    coarse: torch.Tensor  # P_c, (batch, 1, H, W)
    decoder_features: list[torch.Tensor]  # F_dec^1 .. F_dec^L
    aux: list[torch.Tensor] = field(default_factory=list)  # P^1 .. P^L
    pyramid: FeaturePyramid | None = None


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = nn.Conv2d(cfg.in_channels, cfg.channels(0), 3, padding=1)
        self.hpbs = nn.ModuleList()
        self.downs = nn.ModuleList()
        for level in range(1, cfg.levels + 1):
            c_in, c_out = cfg.channels(level - 1), cfg.channels(level)
            self.hpbs.append(HybridPerceptionBlock(c_in, cfg.global_block, cfg.dilations, cfg.state_dim))
            self.downs.append(nn.Conv2d(c_in, c_out, 3, stride=2, padding=1))

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        if image.dim() != 4 or image.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected (batch, {self.cfg.in_channels}, H, W), got {tuple(image.shape)}")
        self.cfg.check_input(image.shape[-2], image.shape[-1])
        x = self.stem(image)
        skips = []
        for hpb, down in zip(self.hpbs, self.downs):
            s = hpb(x)
            skips.append(s)
            x = down(s)
        return FeaturePyramid(skips, x)


class Decoder(nn.Module):
    """L levels of TransConv upsample, skip concatenation and two residual blocks.

    Used both by stage one and, with fresh parameters, by the refiner.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.ups = nn.ModuleList()
        self.fuse = nn.ModuleList()
        # index i handles decoder level i + 1
        for level in range(1, cfg.levels + 1):
            c_skip, c_below = cfg.channels(level - 1), cfg.channels(level)
            self.ups.append(nn.ConvTranspose2d(c_below, c_skip, 2, stride=2))
            self.fuse.append(nn.Sequential(ResBlock(2 * c_skip, c_skip), ResBlock(c_skip)))

    def forward(self, bottleneck: torch.Tensor, skips: list[torch.Tensor]) -> list[torch.Tensor]:
        if len(skips) != self.cfg.levels:
            raise ShapeError(f"expected {self.cfg.levels} skip features, got {len(skips)}")
        x = bottleneck
        features = [None] * self.cfg.levels
        for i in reversed(range(self.cfg.levels)):
            up = self.ups[i](x)
            if up.shape[-2:] != skips[i].shape[-2:] or up.shape[1] != skips[i].shape[1]:
                raise ShapeError(
                    f"level {i + 1}: upsampled {tuple(up.shape)} does not match skip {tuple(skips[i].shape)}"
                )
            x = self.fuse[i](torch.cat([up, skips[i]], dim=1))
            features[i] = x
        return features


class BaseSegmentationNet(nn.Module):
    """Encoder, decoder, the P_c head and one deep-supervision head per level."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.head = nn.Conv2d(cfg.channels(0), 1, 1)
        self.aux_heads = nn.ModuleList(nn.Conv2d(cfg.channels(l - 1), 1, 1) for l in range(1, cfg.levels + 1))

    def encode(self, image: torch.Tensor) -> FeaturePyramid:
        return self.encoder(image)

    def decode(self, pyramid: FeaturePyramid) -> StageOneOutput:
        features = self.decoder(pyramid.bottleneck, pyramid.skips)
        coarse = torch.sigmoid(self.head(features[0]))
        aux = [torch.sigmoid(h(f)) for h, f in zip(self.aux_heads, features)]
        return StageOneOutput(coarse, features, aux, pyramid)

    def forward(self, image: torch.Tensor) -> StageOneOutput:
        return self.decode(self.encode(image))


def forward_coarse(net: BaseSegmentationNet, image: torch.Tensor) -> StageOneOutput:
    return net(image)
