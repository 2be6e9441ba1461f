"""Bicubic super-resolution baseline on a directory of RGB PNGs (e.g. Set-5).

Follows the usual evaluation recipe: crop each image to a multiple of the
scale, take 8-bit BT.601 luma, shrink and re-enlarge it with antialiased
bicubic resampling (rounding to 8 bits after each resize), and score PSNR
(peak 255) after shaving ``scale`` pixels from every border.
"""

from __future__ import annotations

import math
import os
from pathlib import Path

import numpy as np
from PIL import Image

from .data import bicubic_resize, rgb_to_luma

SET5_ENV = "DLNET_SET5"


def _luma_u8(path, scale: int) -> np.ndarray:
    rgb = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    h, w = (rgb.shape[0] // scale) * scale, (rgb.shape[1] // scale) * scale
    return np.round(rgb_to_luma(np.transpose(rgb[:h, :w], (2, 0, 1))))


def bicubic_psnr(path, scale: int = 2) -> float:
    y = _luma_u8(path, scale)
    low = np.clip(np.round(bicubic_resize(y, 1.0 / scale)), 0, 255)
    up = np.clip(np.round(bicubic_resize(low, scale)), 0, 255)
    s = scale
    mse = float(np.mean((up[s:-s, s:-s] - y[s:-s, s:-s]) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(255.0 ** 2 / mse)


def set5_dir() -> Path | None:
    """The directory named by ``DLNET_SET5`` if it holds images, else ``None``."""
    root = os.environ.get(SET5_ENV)
    if not root or not Path(root).is_dir():
        return None
    return Path(root) if any(_images(Path(root))) else None


def _images(root: Path):
    return sorted(p for p in root.iterdir() if p.suffix.lower() in (".png", ".bmp"))


def mean_bicubic_psnr(root, scale: int = 2) -> float:
    return float(np.mean([bicubic_psnr(p, scale) for p in _images(Path(root))]))
