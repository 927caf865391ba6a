"""Convolutional and state-space building blocks.

All modules take and return NCHW tensors.  Every block is shape preserving
and reduces to the identity when its non-residual weights are zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError
from .ssm import SS2D

LEAKY_SLOPE = 0.01


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis at every spatial location of an NCHW map."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=eps)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


def _check_channels(x: torch.Tensor, channels: int, name: str) -> None:
    if x.dim() != 4 or x.shape[1] != channels:
        raise ShapeError(f"{name} expects (batch, {channels}, H, W), got {tuple(x.shape)}")


class ResBlock(nn.Module):
    """out = skip(x) + LeakyReLU(LN(Conv3x3(x))).

    ``skip`` is the identity when the channel count is unchanged and a 1x1
    projection otherwise (decoder levels change width after concatenation).
    """

    def __init__(self, in_channels: int, out_channels: int | None = None):
        super().__init__()
        out_channels = in_channels if out_channels is None else out_channels
        self.in_channels = in_channels
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.norm = ChannelLayerNorm(out_channels)
        self.skip = nn.Identity() if in_channels == out_channels else nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.in_channels, "ResBlock")
        return self.skip(x) + F.leaky_relu(self.norm(self.conv(x)), LEAKY_SLOPE)


class MambaBlock(nn.Module):
    """Gated Mamba block with an SS2D core.

    main = LN(SS2D(SiLU(DWConv(main_proj(LN(x))))))
    out  = out_proj(main * SiLU(gate_proj(LN(x))))
    """

    def __init__(self, channels: int, state_dim: int = 8, expand: int = 2):
        super().__init__()
        inner = expand * channels
        self.channels = channels
        self.norm_in = nn.LayerNorm(channels)
        self.main_proj = nn.Linear(channels, inner)
        self.gate_proj = nn.Linear(channels, inner)
        self.dwconv = nn.Conv2d(inner, inner, 3, padding=1, groups=inner)
        self.ss2d = SS2D(inner, state_dim)
        self.norm_out = nn.LayerNorm(inner)
        self.out_proj = nn.Linear(inner, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.channels, "MambaBlock")
        h = self.norm_in(x.permute(0, 2, 3, 1))  # NHWC
        main = self.main_proj(h).permute(0, 3, 1, 2)
        main = F.silu(self.dwconv(main)).permute(0, 2, 3, 1)
        main = self.norm_out(self.ss2d(main))
        gate = F.silu(self.gate_proj(h))
        return self.out_proj(main * gate).permute(0, 3, 1, 2)


@dataclass
class DSMambaConfig:
    channels: int
    dilations: tuple[int, int, int] = (1, 2, 4)
    variant: str = "fused"  # "fused" | "separate"
    state_dim: int = 8

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        if len(self.dilations) != 3 or min(self.dilations) < 1:
            raise ConfigError(f"need three positive dilations, got {self.dilations}")
        if list(self.dilations) != sorted(self.dilations):
            raise ConfigError(f"dilations must be non-decreasing, got {self.dilations}")
        if self.variant not in ("fused", "separate"):
            raise ConfigError(f"unknown DS-Mamba variant {self.variant!r}")
        if self.channels < 1:
            raise ConfigError("channels must be positive")


class DSMamba(nn.Module):
    """Dual-scale Mamba block.

    The small-scale branch is the input itself; the large-scale branch runs
    three dilated 3x3 convolutions, concatenates them and reduces back to C
    channels.  ``fused`` feeds Concat(small, large) through one Mamba block;
    ``separate`` gives each branch its own Mamba block and fuses afterwards.
    """

    def __init__(self, cfg: DSMambaConfig):
        super().__init__()
        c = cfg.channels
        self.cfg = cfg
        self.dilated = nn.ModuleList(nn.Conv2d(c, c, 3, padding=d, dilation=d) for d in cfg.dilations)
        self.reduce = nn.Conv2d(3 * c, c, 1)
        if cfg.variant == "fused":
            self.mamba = MambaBlock(2 * c, cfg.state_dim)
        else:
            self.mamba_small = MambaBlock(c, cfg.state_dim)
            self.mamba_large = MambaBlock(c, cfg.state_dim)
        self.restore = nn.Conv2d(2 * c, c, 1)

    def large_branch(self, x: torch.Tensor) -> torch.Tensor:
        return self.reduce(torch.cat([conv(x) for conv in self.dilated], dim=1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.cfg.channels, "DSMamba")
        small, large = x, self.large_branch(x)
        if self.cfg.variant == "fused":
            mixed = self.mamba(torch.cat([small, large], dim=1))
        else:
            mixed = torch.cat([self.mamba_small(small), self.mamba_large(large)], dim=1)
        return x + self.restore(mixed)


class SingleScaleMamba(nn.Module):
    """x + Conv1x1(Mamba(x)); the plain-Mamba ablation of the HPB."""

    def __init__(self, channels: int, state_dim: int = 8):
        super().__init__()
        self.mamba = MambaBlock(channels, state_dim)
        self.restore = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.restore(self.mamba(x))


GLOBAL_BLOCKS = ("ds", "ds_sep", "mamba", "cnn")


class HybridPerceptionBlock(nn.Module):
    """Two residual conv blocks followed by a global-context block.

    ``global_block`` selects the ablation variant: ``ds`` (dual-scale, fused),
    ``ds_sep`` (dual-scale, separate branches), ``mamba`` (single-scale) or
    ``cnn`` (no state-space block).
    """

    def __init__(self, channels: int, global_block: str = "ds",
                 dilations: tuple[int, int, int] = (1, 2, 4), state_dim: int = 8):
        super().__init__()
        self.res1 = ResBlock(channels)
        self.res2 = ResBlock(channels)
        if global_block == "ds":
            self.global_block = DSMamba(DSMambaConfig(channels, dilations, "fused", state_dim))
        elif global_block == "ds_sep":
            self.global_block = DSMamba(DSMambaConfig(channels, dilations, "separate", state_dim))
        elif global_block == "mamba":
            self.global_block = SingleScaleMamba(channels, state_dim)
        elif global_block == "cnn":
            self.global_block = nn.Identity()
        else:
            raise ConfigError(f"unknown global block {global_block!r}; choose from {GLOBAL_BLOCKS}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.global_block(self.res2(self.res1(x)))
