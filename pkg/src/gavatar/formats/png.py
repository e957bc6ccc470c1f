"""PNG image I/O: linear float internally, 8-bit sRGB on disk.

Render targets store row 0 at the bottom; PNG rows run top-down, so disk
round-trips flip vertically (disable for already-top-down data like atlases).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import Tensor


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def save_png(image: Tensor, path: str | Path, flip_vertical: bool = True) -> None:
    arr = image.detach().cpu().numpy()
    if flip_vertical:
        arr = arr[::-1]
    srgb = (linear_to_srgb(arr) * 255.0).round().astype(np.uint8)
    Image.fromarray(srgb, mode="RGB").save(str(path))


def load_png(path: str | Path, flip_vertical: bool = True) -> Tensor:
    arr = np.asarray(Image.open(str(path)).convert("RGB"), dtype=np.float32) / 255.0
    lin = srgb_to_linear(arr).astype(np.float32)
    if flip_vertical:
        lin = lin[::-1].copy()
    return torch.from_numpy(lin)
