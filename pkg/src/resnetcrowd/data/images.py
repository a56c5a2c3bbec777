"""8-bit RGB image I/O and resampling (Pillow-backed)."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def load_image(path: str | Path) -> np.ndarray:
    """``[H, W, 3]`` uint8 array of an image file."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def save_image(image: np.ndarray, path: str | Path) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resample of a ``[H, W, 3]`` uint8 image to ``size = (w, h)``."""
    image = np.asarray(image, dtype=np.uint8)
    w, h = size
    if image.shape[:2] == (h, w):
        return image.copy()
    return np.asarray(Image.fromarray(image, mode="RGB").resize((w, h), Image.Resampling.BILINEAR), dtype=np.uint8)


def hflip(image: np.ndarray) -> np.ndarray:
    """Mirror an ``[H, W, ...]`` array about its vertical axis."""
    return np.ascontiguousarray(np.asarray(image)[:, ::-1])
