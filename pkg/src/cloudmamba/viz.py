"""Nine-panel rendering of one inference pass."""
from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

PANELS = (
    ("input", "(a) input RGB"),
    ("ground_truth", "(b) ground truth"),
    ("coarse", "(c) coarse prob P_c"),
    ("coarse_mask", "(d) coarse mask"),
    ("uncertainty", "(e) uncertainty U"),
    ("accept", "(f) acceptance M"),
    ("refined", "(g) refined prob P_r"),
    ("refined_mask", "(h) refined mask"),
    ("mask", "(i) output mask"),
)
LABEL_HEIGHT = 14
MIN_TILE = 128


def to_gray8(values: np.ndarray) -> np.ndarray:
    """[0, 1] map to 8-bit; 0.5 renders as 128 and 1 as 255."""
    return np.round(np.clip(values, 0.0, 1.0) * 255).astype(np.uint8)


def rgb_composite(bands: np.ndarray) -> np.ndarray:
    """True-colour view of (H, W, 4) blue/green/red/NIR bands, stretched to the max."""
    rgb = bands[..., [2, 1, 0]].astype(np.float64)
    return to_gray8(rgb / max(float(rgb.max()), 1e-6))


def render_stages(bands: np.ndarray, maps: dict[str, np.ndarray], ground_truth: np.ndarray | None = None):
    """Compose the 3x3 panel.

    ``maps`` holds (H, W) arrays for the keys of PANELS other than ``input``
    and ``ground_truth``.  Returns the RGB image and each panel's tile box
    (x0, y0, x1, y1) in image coordinates, excluding the label strip.
    """
    height, width = bands.shape[:2]
    scale = max(1, -(-MIN_TILE // max(height, width)))
    tile_h, tile_w = height * scale, width * scale
    canvas = Image.new("RGB", (3 * tile_w, 3 * (tile_h + LABEL_HEIGHT)), "black")
    draw = ImageDraw.Draw(canvas)
    boxes = {}
    for index, (key, label) in enumerate(PANELS):
        row, col = divmod(index, 3)
        x0, y0 = col * tile_w, row * (tile_h + LABEL_HEIGHT) + LABEL_HEIGHT
        if key == "input":
            tile = rgb_composite(bands)
        elif key == "ground_truth" and ground_truth is None:
            tile = np.full((height, width), 64, np.uint8)
        elif key == "ground_truth":
            tile = to_gray8(ground_truth.astype(np.float64))
        else:
            tile = to_gray8(np.asarray(maps[key], dtype=np.float64))
        tile = np.repeat(np.repeat(tile, scale, axis=0), scale, axis=1)
        canvas.paste(Image.fromarray(tile).convert("RGB"), (x0, y0))
        draw.text((x0 + 2, y0 - LABEL_HEIGHT + 1), label, fill="white")
        if key == "ground_truth" and ground_truth is None:
            draw.text((x0 + 4, y0 + tile_h // 2 - 6), "not available", fill="white")
        boxes[key] = (x0, y0, x0 + tile_w, y0 + tile_h)
    return np.asarray(canvas), boxes
