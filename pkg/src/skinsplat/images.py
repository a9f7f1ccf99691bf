"""PNG helpers: 8-bit RGB, 8-bit masks, 16-bit depth."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

DEPTH_SCALE = 1000.0  # stored as millimetres in 16-bit PNGs


def save_rgb(path: str | Path, img: np.ndarray) -> None:
    """Save a float image in [0, 1] as 8-bit RGB PNG."""
    data = np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def load_rgb(path: str | Path) -> np.ndarray:
    """Load a PNG as float RGB in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def image_size(path: str | Path) -> tuple[int, int]:
    """(width, height) without decoding the pixel data."""
    with Image.open(path) as im:
        return im.size


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def load_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) >= 128


def save_depth16(path: str | Path, depth: np.ndarray) -> None:
    """Depth in metres stored as clipped 16-bit millimetres."""
    mm = np.clip(np.asarray(depth) * DEPTH_SCALE, 0, 65535).astype(np.uint16)
    Image.fromarray(mm, mode="I;16").save(path)
