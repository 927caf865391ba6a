"""Two-stage cloud segmentation with a dual-scale Mamba encoder and uncertainty-guided refinement."""
from .config import RunConfig, build_config
from .errors import CloudMambaError
from .net import ModelConfig
from .refine import CloudMamba, ThresholdConfig, forward_full
from .ssm import cross_merge, cross_scan, selective_scan, selective_scan_reference, ss2d

__version__ = "0.1.0"

__all__ = [
    "CloudMamba", "CloudMambaError", "ModelConfig", "RunConfig", "ThresholdConfig", "build_config",
    "cross_merge", "cross_scan", "forward_full", "selective_scan", "selective_scan_reference", "ss2d",
]
