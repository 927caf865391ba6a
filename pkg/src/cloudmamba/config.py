"""Run configuration, presets and JSON (de)serialization."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .losses import LossConfig
from .net import ModelConfig
from .refine import ThresholdConfig


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    thresholds: ThresholdConfig = field(default_factory=ThresholdConfig)
    lr: float = 1e-4
    weight_decay: float = 1e-2
    lr_min_factor: float = 1e-2  # cosine schedule floor, as a fraction of lr
    epochs: int = 30
    batch_size: int | None = 8
    seed: int = 0
    deterministic: bool = False
    augment: bool = True
    patch_size: int = 64
    synth_count: int = 200
    data_dir: str | None = None
    out_dir: str = "runs/default"

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.thresholds, dict):
            self.thresholds = ThresholdConfig(**self.thresholds)
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patch_size % self.model.multiple:
            raise ConfigError(f"patch_size {self.patch_size} is not a multiple of {self.model.multiple}")

    @property
    def lr_min(self) -> float:
        return self.lr * self.lr_min_factor

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc


PRESETS = {
    # desk scale: small enough to train on one CPU in a few minutes
    "desk": {
        "model": {"levels": 3, "base_channels": 16},
        "epochs": 5,
        "batch_size": 8,
        "patch_size": 64,
        "synth_count": 200,
        "lr": 1e-3,
    },
    "paper": {
        "model": {"levels": 5},
        "epochs": 30,
        "batch_size": None,
        "patch_size": 512,
        "lr": 1e-4,
    },
}


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def build_config(preset: str | None = None, config_file=None, **overrides) -> RunConfig:
    """Defaults, then the preset, then the config file, then explicit overrides."""
    data = RunConfig().to_dict()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        data = _merge(data, PRESETS[preset])
    if config_file is not None:
        try:
            data = _merge(data, json.loads(Path(config_file).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_file}: {exc}") from exc
    data = _merge(data, {k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(data)


def config_diff(a, b, prefix: str = "") -> list[str]:
    """Dotted names of fields that differ between two (nested) dataclass dicts."""
    a = dataclasses.asdict(a) if dataclasses.is_dataclass(a) else a
    b = dataclasses.asdict(b) if dataclasses.is_dataclass(b) else b
    names = []
    for key in sorted(set(a) | set(b)):
        va, vb = a.get(key), b.get(key)
        if isinstance(va, dict) and isinstance(vb, dict):
            names += config_diff(va, vb, f"{prefix}{key}.")
        elif _norm(va) != _norm(vb):
            names.append(prefix + key)
    return names


def _norm(value):
    return list(value) if isinstance(value, tuple) else value
