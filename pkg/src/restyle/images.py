"""PNG <-> tensor helpers.

Images travel through the pipeline as float32 torch tensors of shape
[3, H, W] with values in [-1, 1].
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image


def load_image(path: str | Path) -> torch.Tensor:
    img = Image.open(path).convert("RGB")
    arr = np.asarray(img, dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(x: torch.Tensor, path: str | Path) -> None:
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"expected [3, H, W] tensor, got {tuple(x.shape)}")
    arr = ((x.detach().clamp(-1.0, 1.0) + 1.0) * 127.5).round().to(torch.uint8)
    Image.fromarray(arr.permute(1, 2, 0).numpy()).save(path)


def image_grid(rows: list[list[torch.Tensor]], pad: int = 2) -> torch.Tensor:
    """Tile images into one [3, H, W] grid; all cells must share a shape."""
    cell = rows[0][0].shape
    ph, pw = cell[1] + pad, cell[2] + pad
    grid = torch.ones(3, len(rows) * ph + pad, max(len(r) for r in rows) * pw + pad)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            if img.shape != cell:
                raise ValueError("grid cells must share a shape")
            grid[:, pad + i * ph : pad + i * ph + cell[1], pad + j * pw : pad + j * pw + cell[2]] = img
    return grid


def validate_image(x: torch.Tensor, spatial_factor: int = 1) -> None:
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"expected [3, H, W] image tensor, got {tuple(x.shape)}")
    if x.shape[1] % spatial_factor or x.shape[2] % spatial_factor:
        raise ValueError(
            f"image dims {tuple(x.shape[1:])} not divisible by factor {spatial_factor}"
        )
