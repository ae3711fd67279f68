"""Geometric tiling of a canvas into fixed-size patches.

Purely positional: no normalization or encoding happens here. Windows that
would extend past the image edge are dropped (floor semantics), so every
patch is fully inside the source image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["PatchGrid", "Patch", "patch_grid", "extract_patches", "o2p_ratio"]


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    stride: int
    height: int
    width: int
    coords: tuple[tuple[int, int], ...]  # row-major (y, x) top-left corners

    def __len__(self) -> int:
        return len(self.coords)


@dataclass(frozen=True)
class Patch:
    index: int  # position in row-major grid order
    top_left: tuple[int, int]  # (y, x)
    pixels: np.ndarray  # (patch_size, patch_size) view into the source


def patch_grid(height: int, width: int, patch_size: int, stride: int) -> PatchGrid:
    """Row-major grid of fully-contained patch positions."""
    if patch_size > height or patch_size > width:
        raise ValueError(
            f"patch size {patch_size} exceeds image {height}x{width}"
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    rows = (height - patch_size) // stride + 1
    cols = (width - patch_size) // stride + 1
    coords = tuple(
        (r * stride, c * stride) for r in range(rows) for c in range(cols)
    )
    return PatchGrid(patch_size, stride, height, width, coords)


def extract_patches(image: np.ndarray, patch_size: int, stride: int) -> list[Patch]:
    """Tile ``image`` row-major; patch pixels are views, not copies."""
    h, w = image.shape[:2]
    grid = patch_grid(h, w, patch_size, stride)
    return [
        Patch(i, (y, x), image[y : y + patch_size, x : x + patch_size])
        for i, (y, x) in enumerate(grid.coords)
    ]


def o2p_ratio(object_size: float, patch_size: float) -> float:
    """Object-to-patch area ratio as a percentage."""
    if object_size <= 0 or patch_size <= 0:
        raise ValueError("object and patch sizes must be positive")
    return 100.0 * object_size**2 / patch_size**2
