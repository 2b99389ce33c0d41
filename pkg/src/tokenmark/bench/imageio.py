"""8-bit PNG reading and writing for (3, H, W) float images and gray masks."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img: np.ndarray) -> Path:
    """Save a (3, H, W) image in [0, 1] as 8-bit RGB, or an (H, W) array as 8-bit gray."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    a = to_uint8(img)
    if a.ndim == 3:
        Image.fromarray(a.transpose(1, 2, 0), mode="RGB").save(path)
    elif a.ndim == 2:
        Image.fromarray(a, mode="L").save(path)
    else:
        raise ValueError(f"cannot write array of shape {a.shape} as PNG")
    return path


def read_png(path) -> np.ndarray:
    """(3, H, W) float32 in [0, 1]; gray and RGBA inputs are converted to RGB."""
    with Image.open(path) as im:
        a = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return a.transpose(2, 0, 1).copy()


def read_mask(path) -> np.ndarray:
    """Single-channel raster as float in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float32) / 255.0
