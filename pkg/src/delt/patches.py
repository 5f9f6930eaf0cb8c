"""Per-class pools of real-image crops, scored by the teacher and picked around the median."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .augment import crop_resize, sample_crop_box
from .core import ORDERINGS, SELECTIONS, ConfigError, DatasetProfile
from .teacher import TeacherSnapshot, forward


class PoolExhausted(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RankedPatch:
    source_id: int
    box: tuple[int, int, int, int]  # x, y, w, h in source pixels
    pixels: torch.Tensor  # C×R×R in [0, 1]
    class_id: int
    score: float | None = None
    rank: int | None = None

    @property
    def patch_id(self) -> str:
        x, y, w, h = self.box
        return f"{self.source_id}:{x},{y},{w},{h}"

    def tie_key(self) -> tuple:
        return (self.source_id, self.box)


@dataclass(frozen=True, eq=False)
class PatchPool:
    class_id: int
    patches: tuple[RankedPatch, ...]
    scored: bool = False

    @property
    def pool_size(self) -> int:
        return len(self.patches)

    def scores(self) -> list[float]:
        return [p.score for p in self.patches]


def _as_unit(img: torch.Tensor) -> torch.Tensor:
    if img.dtype == torch.uint8:
        return img.to(torch.float32) / 255.0
    return img.to(torch.float32)


def build_pool(
    images: Sequence[torch.Tensor],
    class_id: int,
    crops_per_image: int,
    crop_scale: tuple[float, float],
    seed: int,
    resolution: int,
    source_ids: Sequence[int] | None = None,
) -> PatchPool:
    """Draw ``crops_per_image`` random-resized crops from each ``C×H×W`` [0, 1] image.

    ``source_ids`` defaults to positions in ``images``; pass the indices into
    the full training split to keep ids globally meaningful.
    """
    if len(images) == 0:
        raise ValueError(f"class {class_id} has no training images")
    if crops_per_image < 1:
        raise ValueError("crops_per_image must be >= 1")
    lo, hi = crop_scale
    if not 0 < lo <= hi <= 1:
        raise ConfigError("crop scale must satisfy 0 < min <= max <= 1")
    ids = list(range(len(images))) if source_ids is None else [int(i) for i in source_ids]
    gen = torch.Generator().manual_seed(seed)
    patches = []
    for sid, img in zip(ids, images):
        img = _as_unit(img)
        _, h, w = img.shape
        for _ in range(crops_per_image):
            box = sample_crop_box(h, w, (lo, hi), gen)
            patches.append(RankedPatch(sid, box, crop_resize(img, box, resolution).clamp(0, 1), class_id))
    return PatchPool(class_id, tuple(patches))


def default_crops_per_image(num_images: int, ipc: int, grid: int = 1, headroom: int = 4) -> int:
    """Smallest crops-per-image giving a pool of at least ``headroom * ipc * grid²`` patches."""
    need = headroom * ipc * grid * grid
    return max(1, -(-need // max(1, num_images)))


@torch.no_grad()
def score_pool(pool: PatchPool, teacher: TeacherSnapshot, profile: DatasetProfile,
               batch_size: int = 256) -> PatchPool:
    """Score each patch by the teacher's softmax probability of its class and sort ascending.

    Ties are broken by ``(source_id, box)``.
    """
    if not 0 <= pool.class_id < teacher.num_classes:
        raise ConfigError(f"class {pool.class_id} outside teacher's {teacher.num_classes} classes")
    device = teacher.device
    scores = []
    for i in range(0, pool.pool_size, batch_size):
        chunk = torch.stack([p.pixels for p in pool.patches[i:i + batch_size]])
        logits = forward(teacher, profile.normalize(chunk).to(device), capture_stats=False).logits
        probs = F.softmax(logits.double(), dim=1)[:, pool.class_id]
        scores.extend(float(v) for v in probs.cpu())
    scored = [replace(p, score=s) for p, s in zip(pool.patches, scores)]
    scored.sort(key=lambda p: (p.score, p.tie_key()))
    ranked = tuple(replace(p, rank=r) for r, p in enumerate(scored))
    return PatchPool(pool.class_id, ranked, scored=True)


def select_ranks(pool_size: int, count: int, selection: str, ordering: str, seed: int) -> list[int]:
    """Rank indices chosen by ``selection`` and emitted in ``ordering``.

    ``median`` keeps the ``count`` ranks nearest ``m = pool_size // 2``, lower
    rank first at equal distance. ``median_out`` emits ranks by increasing
    distance from ``m`` with the same tie-break, giving m, m-1, m+1, m-2, ...
    """
    if selection not in SELECTIONS:
        raise ConfigError(f"unknown selection {selection!r}")
    if ordering not in ORDERINGS:
        raise ConfigError(f"unknown ordering {ordering!r}")
    if count > pool_size:
        raise PoolExhausted(f"pool exhausted: need {count} patches, pool has {pool_size}")
    m = pool_size // 2
    if selection == "median":
        chosen = sorted(range(pool_size), key=lambda r: (abs(r - m), r))[:count]
    elif selection == "lowest":
        chosen = list(range(count))
    else:
        chosen = list(range(pool_size - count, pool_size))

    if ordering == "median_out":
        return sorted(chosen, key=lambda r: (abs(r - m), r))
    if ordering == "ascending":
        return sorted(chosen)
    if ordering == "descending":
        return sorted(chosen, reverse=True)
    perm = np.random.default_rng(seed).permutation(len(chosen))
    chosen = sorted(chosen)
    return [chosen[i] for i in perm]


def select_and_order(pool: PatchPool, ipc: int, selection: str = "median",
                     ordering: str = "median_out", seed: int = 0) -> list[RankedPatch]:
    if not pool.scored:
        raise ValueError("pool must be scored before selection")
    return [pool.patches[r] for r in select_ranks(pool.pool_size, ipc, selection, ordering, seed)]


# ------------------------------------------------------------------ caching

def save_pool(pool: PatchPool, path: str | os.PathLike) -> None:
    """Persist a scored pool as JSON (crop boxes and scores; pixels are re-cropped on load)."""
    doc = {
        "class_id": pool.class_id,
        "scored": pool.scored,
        "patches": [
            {"source_id": p.source_id, "box": list(p.box), "score": p.score, "rank": p.rank}
            for p in pool.patches
        ],
    }
    Path(path).write_text(json.dumps(doc))


def load_pool(path: str | os.PathLike, images_by_id, resolution: int) -> PatchPool:
    """Inverse of :func:`save_pool`. ``images_by_id`` maps source id to its [0, 1] image."""
    doc = json.loads(Path(path).read_text())
    patches = []
    for e in doc["patches"]:
        img = _as_unit(images_by_id[e["source_id"]])
        box = tuple(e["box"])
        patches.append(RankedPatch(e["source_id"], box, crop_resize(img, box, resolution).clamp(0, 1),
                                   doc["class_id"], e["score"], e["rank"]))
    return PatchPool(doc["class_id"], tuple(patches), doc["scored"])
