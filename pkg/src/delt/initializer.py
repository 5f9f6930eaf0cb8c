"""Initial synthetic images: n×n mosaics of ranked real patches, or Gaussian noise."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F

from .core import DatasetProfile
from .patches import RankedPatch


def _cell_edges(size: int, n: int) -> list[int]:
    return [size * i // n for i in range(n + 1)]


def mosaic_init(patches: Sequence[RankedPatch], grid: int, profile: DatasetProfile) -> torch.Tensor:
    """Tile the first ``grid²`` patches row-major onto a canvas; returns a normalized ``C×R×R`` image."""
    if grid < 1:
        raise ValueError("grid must be >= 1")
    need = grid * grid
    if len(patches) < need:
        raise ValueError(f"mosaic {grid}x{grid} needs {need} patches, got {len(patches)}")
    res = profile.resolution
    edges = _cell_edges(res, grid)
    canvas = torch.empty(profile.channels, res, res)
    for i, patch in enumerate(patches[:need]):
        r, c = divmod(i, grid)
        y0, y1, x0, x1 = edges[r], edges[r + 1], edges[c], edges[c + 1]
        px = patch.pixels.to(torch.float32)
        if px.shape[-2:] != (y1 - y0, x1 - x0):
            px = F.interpolate(px.unsqueeze(0), size=(y1 - y0, x1 - x0), mode="bilinear",
                               align_corners=False, antialias=True)[0]
        canvas[:, y0:y1, x0:x1] = px
    return profile.normalize(canvas)


def gaussian_init(profile: DatasetProfile, seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(profile.image_shape, generator=gen)


def initial_images(
    profile: DatasetProfile,
    ipc: int,
    init_mode: str,
    ordered_patches: Sequence[RankedPatch] | None = None,
    grid: int = 1,
    seed: int = 0,
) -> list[tuple[torch.Tensor, str]]:
    """One class's ``ipc`` starting images with their provenance strings.

    Real-patch mode consumes ``grid²`` consecutive patches per image, so the
    given ordering carries through to ipc index order.
    """
    out = []
    if init_mode == "gaussian":
        for i in range(ipc):
            out.append((gaussian_init(profile, seed * 100003 + i), "gaussian"))
        return out
    if init_mode != "real_patch":
        raise ValueError(f"unknown init mode {init_mode!r}")
    per = grid * grid
    if ordered_patches is None or len(ordered_patches) < ipc * per:
        have = 0 if ordered_patches is None else len(ordered_patches)
        raise ValueError(f"need {ipc * per} patches for {ipc} images of a {grid}x{grid} mosaic, got {have}")
    for i in range(ipc):
        chunk = ordered_patches[i * per:(i + 1) * per]
        out.append((mosaic_init(chunk, grid, profile), "+".join(p.patch_id for p in chunk)))
    return out
