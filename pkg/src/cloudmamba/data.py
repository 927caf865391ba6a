"""Patch I/O, augmentation and the synthetic cloud-scene generator.

On-disk layout of a dataset directory::

    manifest.json        {"items": [{"id": ..., "split": "train" | "test"}, ...]}
    images/<id>.png      16-bit, 4 channels; PNG channels R, G, B, A carry bands B, G, R, NIR
    masks/<id>.png       8-bit grayscale, 255 = cloud, 0 = clear
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import ConfigError, CorruptFileError, DatasetError, ManifestMismatchError, MissingMaskError, ShapeError

log = logging.getLogger(__name__)

BAND_NAMES = ("blue", "green", "red", "nir")
MAX_16BIT = 65535
# cv2 stores 4-channel arrays as BGRA; this order puts band (B, G, R, NIR) in PNG (R, G, B, A)
_CV2_ORDER = [2, 1, 0, 3]


@dataclass
class RasterPatch:
    bands: np.ndarray  # (H, W, C) float32 in [0, 1]
    identifier: str = ""

    def __post_init__(self):
        if self.bands.ndim != 3:
            raise ShapeError(f"bands must be (H, W, C), got {self.bands.shape}")
        if self.bands.size and (self.bands.min() < 0 or self.bands.max() > 1):
            raise ShapeError("band values must lie in [0, 1]")


def normalize_bands(raw: np.ndarray) -> np.ndarray:
    """16-bit integer bands to [0, 1]."""
    return (np.asarray(raw, dtype=np.float64) / MAX_16BIT).astype(np.float32)


def quantize_bands(bands: np.ndarray) -> np.ndarray:
    return np.round(np.clip(bands, 0.0, 1.0) * MAX_16BIT).astype(np.uint16)


def binary_cloud_mask(mask: np.ndarray, cloud_values=(255,)) -> np.ndarray:
    """Collapse a class-coded reference mask to cloud/clear.

    Every code not listed in ``cloud_values`` becomes clear, which is how cloud
    shadow (GF1_WHU) and snow (Levir_CS) are folded into the background.  The
    code values of the original products must be supplied by the caller.
    """
    return np.isin(mask, cloud_values).astype(np.uint8)


# --- augmentation -----------------------------------------------------------

FLIPS = ("identity", "horizontal", "vertical")


def dihedral(arr: np.ndarray, flip: int, quarter_turns: int) -> np.ndarray:
    """Flip (0 none, 1 horizontal, 2 vertical) then rotate by 90 degrees * quarter_turns."""
    if flip == 1:
        arr = arr[:, ::-1]
    elif flip == 2:
        arr = arr[::-1]
    return np.ascontiguousarray(np.rot90(arr, quarter_turns, axes=(0, 1)))


def inverse_dihedral(arr: np.ndarray, flip: int, quarter_turns: int) -> np.ndarray:
    arr = np.rot90(arr, -quarter_turns, axes=(0, 1))
    if flip == 1:
        arr = arr[:, ::-1]
    elif flip == 2:
        arr = arr[::-1]
    return np.ascontiguousarray(arr)


def draw_augmentation(seed) -> tuple[int, int]:
    rng = np.random.default_rng(seed)
    return int(rng.integers(3)), int(rng.integers(4))


def augment(patch: np.ndarray, mask: np.ndarray, seed, transform: tuple[int, int] | None = None):
    """Apply the same seeded flip/rotation to a (H, W, C) patch and its (H, W) mask."""
    flip, turns = transform if transform is not None else draw_augmentation(seed)
    if turns % 2 and patch.shape[0] != patch.shape[1]:
        raise ShapeError(f"cannot rotate a non-square {patch.shape[0]}x{patch.shape[1]} patch by 90 degrees")
    return dihedral(patch, flip, turns), dihedral(mask, flip, turns)


# --- synthetic scenes -------------------------------------------------------

@dataclass
class SynthParams:
    seed: int = 0
    size: int = 64
    blob_count: tuple[int, int] = (1, 4)  # inclusive range of cloud blobs
    thin_probability: float = 0.4  # chance that a blob is a thin cloud
    thin_alpha: tuple[float, float] = (0.2, 0.5)
    thick_alpha: tuple[float, float] = (0.85, 1.0)
    confuser_probability: float = 0.3
    octaves: int = 3

    def __post_init__(self):
        self.blob_count = tuple(self.blob_count)
        self.thin_alpha = tuple(self.thin_alpha)
        self.thick_alpha = tuple(self.thick_alpha)
        if self.size < 4:
            raise ConfigError(f"scene size {self.size} is too small")
        if not 0 <= self.blob_count[0] <= self.blob_count[1]:
            raise ConfigError(f"bad blob count range {self.blob_count}")
        for lo, hi in (self.thin_alpha, self.thick_alpha):
            if not 0 < lo <= hi < 1 + 1e-12:
                raise ConfigError(f"alpha range ({lo}, {hi}) must lie in (0, 1]")
        if self.thin_alpha[1] >= 1:
            raise ConfigError("thin-cloud alpha must stay below 1")
        if self.octaves < 1:
            raise ConfigError("need at least one noise octave")


def value_noise(rng: np.random.Generator, size: int, cells: int, octaves: int = 3) -> np.ndarray:
    """Multi-octave value noise in [0, 1]: random lattice values, bilinear in between."""
    total = np.zeros((size, size))
    weight = 0.0
    for octave in range(octaves):
        n = cells * 2 ** octave
        lattice = rng.random((n + 1, n + 1))
        coords = np.linspace(0, n, size, endpoint=False) + n / (2 * size)
        i0 = np.floor(coords).astype(int)
        t = coords - i0
        i1 = np.minimum(i0 + 1, n)
        top = lattice[i0][:, i0] * (1 - t)[None, :] + lattice[i0][:, i1] * t[None, :]
        bottom = lattice[i1][:, i0] * (1 - t)[None, :] + lattice[i1][:, i1] * t[None, :]
        layer = top * (1 - t)[:, None] + bottom * t[:, None]
        amplitude = 0.5 ** octave
        total += amplitude * layer
        weight += amplitude
    return total / weight


def _background(rng: np.random.Generator, p: SynthParams) -> np.ndarray:
    size = p.size
    vegetation = value_noise(rng, size, 2, p.octaves)
    soil = value_noise(rng, size, 3, p.octaves)
    water = value_noise(rng, size, 2, p.octaves) < 0.3
    bands = np.empty((size, size, 4))
    bands[..., 0] = 0.06 + 0.08 * soil
    bands[..., 1] = 0.08 + 0.06 * soil + 0.04 * vegetation
    bands[..., 2] = 0.07 + 0.14 * soil - 0.03 * vegetation
    bands[..., 3] = 0.18 + 0.30 * vegetation + 0.05 * soil
    bands[water] = bands[water] * 0.5 + np.array([0.04, 0.04, 0.02, 0.01])
    bands += rng.normal(0.0, 0.005, bands.shape)
    return bands


def _blob_profile(rng: np.random.Generator, size: int, octaves: int) -> np.ndarray:
    """Smooth cloud-body density in [0, 1]; the label core is where it exceeds 0.5."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    cy, cx = rng.uniform(0.1, 0.9, 2)
    ry, rx = rng.uniform(0.12, 0.35, 2)
    angle = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = (dx * np.cos(angle) + dy * np.sin(angle)) / rx
    v = (-dx * np.sin(angle) + dy * np.cos(angle)) / ry
    radial = 1.0 - np.sqrt(u ** 2 + v ** 2)
    ragged = value_noise(rng, size, 4, octaves) - 0.5
    return np.clip(0.5 + 1.6 * (radial + 0.8 * ragged - 0.25), 0.0, 1.0)


def _confuser(rng: np.random.Generator, bands: np.ndarray) -> None:
    """Paint a bright, sharp-edged snow/bright-surface patch (label stays clear)."""
    size = bands.shape[0]
    h, w = rng.integers(size // 8, size // 3, 2)
    y, x = rng.integers(0, size - h), rng.integers(0, size - w)
    region = np.zeros((size, size), bool)
    region[y:y + h, x:x + w] = True
    texture = 0.9 + 0.1 * rng.random((size, size))
    snow = np.array([0.80, 0.82, 0.80, 0.45])
    bands[region] = snow * texture[region][:, None]


def generate_scene(p: SynthParams) -> tuple[RasterPatch, np.ndarray]:
    """Return a 4-band scene and its cloud mask; identical for identical params.

    Each blob k has a density s_k in [0, 1] and a peak alpha a_k, and is
    composited with alpha_k = a_k * s_k.  A pixel is labelled cloud iff some
    blob has alpha_k > 0.5 * a_k (equivalently s_k > 0.5), so thin clouds are
    labelled over their core just like thick ones.
    """
    rng = np.random.default_rng(p.seed)
    size = p.size
    bands = _background(rng, p)
    if rng.random() < p.confuser_probability:
        _confuser(rng, bands)
    label = np.zeros((size, size), np.uint8)
    for _ in range(int(rng.integers(p.blob_count[0], p.blob_count[1] + 1))):
        thin = rng.random() < p.thin_probability
        peak = rng.uniform(*(p.thin_alpha if thin else p.thick_alpha))
        density = _blob_profile(rng, size, p.octaves)
        alpha = (peak * density)[..., None]
        shade = 0.92 + 0.08 * value_noise(rng, size, 6, 2)
        cloud = np.array([0.78, 0.80, 0.80, 0.78])[None, None, :] * shade[..., None]
        bands = bands * (1 - alpha) + cloud * alpha
        label |= (density > 0.5).astype(np.uint8)
    bands = np.clip(bands, 0.0, 1.0).astype(np.float32)
    return RasterPatch(bands, f"synth_{p.seed}"), label


# --- on-disk format ---------------------------------------------------------

def write_patch(root, identifier: str, bands: np.ndarray, mask: np.ndarray | None = None) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(root / "images" / f"{identifier}.png"), quantize_bands(bands)[..., _CV2_ORDER]):
        raise DatasetError(f"could not write image {identifier}")
    if mask is not None:
        write_mask(root / "masks" / f"{identifier}.png", mask)


def write_mask(path, mask: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), (np.asarray(mask) > 0).astype(np.uint8) * 255):
        raise DatasetError(f"could not write mask {path}")


def write_gray16(path, values: np.ndarray) -> None:
    """Store a [0, 1] map as a 16-bit grayscale PNG."""
    if not cv2.imwrite(str(path), quantize_bands(np.asarray(values))):
        raise DatasetError(f"could not write {path}")


def read_gray16(path) -> np.ndarray:
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None or arr.dtype != np.uint16 or arr.ndim != 2:
        raise CorruptFileError(f"{path} is not a 16-bit grayscale image")
    return normalize_bands(arr)


def read_image(path, identifier: str = "") -> RasterPatch:
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise CorruptFileError(f"cannot decode image {identifier or path}")
    if arr.ndim != 3 or arr.shape[2] != 4 or arr.dtype != np.uint16:
        raise CorruptFileError(f"image {identifier or path} must be 16-bit with 4 channels, got {arr.dtype} {arr.shape}")
    return RasterPatch(normalize_bands(arr[..., _CV2_ORDER]), identifier or Path(path).stem)


def read_mask(path, identifier: str = "") -> np.ndarray:
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None or arr.ndim != 2:
        raise CorruptFileError(f"cannot decode mask {identifier or path} as 8-bit grayscale")
    values = np.unique(arr)
    if not np.isin(values, (0, 255)).all():
        log.warning("mask %s has values %s; treating every nonzero value as cloud",
                    identifier or path, values.tolist())
    return (arr > 0).astype(np.uint8)


def write_manifest(root, items: list[dict]) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.json").write_text(json.dumps({"items": items}, indent=2) + "\n")


@dataclass
class PatchDataset:
    """Manifest-ordered view over a dataset directory; reads files lazily."""

    root: Path
    items: list[dict] = field(default_factory=list)

    @property
    def ids(self) -> list[str]:
        return [item["id"] for item in self.items]

    def __len__(self) -> int:
        return len(self.items)

    def image_path(self, identifier: str) -> Path:
        return self.root / "images" / f"{identifier}.png"

    def mask_path(self, identifier: str) -> Path:
        return self.root / "masks" / f"{identifier}.png"

    def __getitem__(self, index: int) -> tuple[np.ndarray, np.ndarray, str]:
        identifier = self.items[index]["id"]
        patch = read_image(self.image_path(identifier), identifier)
        mask = read_mask(self.mask_path(identifier), identifier)
        if mask.shape != patch.bands.shape[:2]:
            raise CorruptFileError(f"mask {identifier} is {mask.shape}, image is {patch.bands.shape[:2]}")
        return patch.bands, mask, identifier

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def split(self, name: str | None) -> "PatchDataset":
        if name is None:
            return self
        return PatchDataset(self.root, [item for item in self.items if item.get("split") == name])


def load_dataset(root, split: str | None = None) -> PatchDataset:
    """Open and validate a dataset directory; iteration follows manifest order."""
    root = Path(root)
    manifest = root / "manifest.json"
    if not manifest.is_file():
        raise ManifestMismatchError(f"no manifest.json in {root}")
    try:
        items = json.loads(manifest.read_text())["items"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptFileError(f"unreadable manifest {manifest}: {exc}") from exc
    listed = set()
    for item in items:
        identifier = item["id"]
        listed.add(identifier)
        if not (root / "images" / f"{identifier}.png").is_file():
            raise ManifestMismatchError(f"manifest lists {identifier} but images/{identifier}.png is missing")
        if not (root / "masks" / f"{identifier}.png").is_file():
            raise MissingMaskError(f"no mask for image {identifier}")
    images_dir = root / "images"
    if images_dir.is_dir():
        extra = sorted(p.stem for p in images_dir.glob("*.png") if p.stem not in listed)
        if extra:
            raise ManifestMismatchError(f"images not listed in manifest: {', '.join(extra[:5])}")
    return PatchDataset(root, list(items)).split(split)


def make_synthetic_dataset(out_dir, count: int, seed: int = 0, size: int = 64,
                           test_fraction: float = 0.1, **synth_kwargs) -> PatchDataset:
    """Write ``count`` seeded scenes plus a manifest with a seeded train/test split."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "images").mkdir(exist_ok=True)
        (out_dir / "masks").mkdir(exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise DatasetError(f"{out_dir} is not writable")
    rng = np.random.default_rng(seed)
    scene_seeds = rng.integers(0, 2 ** 31 - 1, size=count)
    n_test = int(round(test_fraction * count))
    test = set(rng.permutation(count)[:n_test].tolist())
    items = []
    for i in range(count):
        identifier = f"synth_{i:05d}"
        patch, mask = generate_scene(SynthParams(seed=int(scene_seeds[i]), size=size, **synth_kwargs))
        write_patch(out_dir, identifier, patch.bands, mask)
        items.append({"id": identifier, "split": "test" if i in test else "train"})
    write_manifest(out_dir, items)
    return load_dataset(out_dir)
