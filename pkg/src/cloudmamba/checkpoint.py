"""Checkpoints: a torch state-dict blob plus a JSON sidecar with config and SHA-256."""
from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path

import torch

from .config import RunConfig, config_diff
from .errors import CheckpointError, ConfigMismatchError
from .refine import CloudMamba


def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    blob = path if path.suffix == ".pt" else path.with_suffix(".pt")
    return blob, blob.with_suffix(".json")


def save_checkpoint(path, model: CloudMamba, cfg: RunConfig, **extra) -> Path:
    blob, sidecar = _paths(path)
    blob.parent.mkdir(parents=True, exist_ok=True)
    buffer = io.BytesIO()
    torch.save(model.state_dict(), buffer)
    data = buffer.getvalue()
    blob.write_bytes(data)
    meta = {"sha256": hashlib.sha256(data).hexdigest(), "config": cfg.to_dict(), **extra}
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return blob


def read_metadata(path) -> dict:
    _, sidecar = _paths(path)
    if not sidecar.is_file():
        raise CheckpointError(f"missing checkpoint metadata {sidecar}")
    return json.loads(sidecar.read_text())


def load_checkpoint(path, expected: RunConfig | None = None) -> tuple[CloudMamba, RunConfig]:
    """Rebuild the model, verifying the content hash and (optionally) the model config."""
    blob, _ = _paths(path)
    if not blob.is_file():
        raise CheckpointError(f"missing checkpoint {blob}")
    meta = read_metadata(blob)
    data = blob.read_bytes()
    if hashlib.sha256(data).hexdigest() != meta.get("sha256"):
        raise CheckpointError(f"{blob} does not match the hash recorded in its metadata")
    cfg = RunConfig.from_dict(meta["config"])
    if expected is not None:
        differing = config_diff(cfg.model, expected.model)
        if differing:
            raise ConfigMismatchError("model config differs from checkpoint in: " + ", ".join(differing))
    model = CloudMamba(cfg.model)
    state = torch.load(io.BytesIO(data), map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model, cfg
