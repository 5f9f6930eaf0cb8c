"""Seeded augmentation primitives shared by ranking, recovery and post-training."""

from __future__ import annotations

import contextlib
import math
import random

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torchvision.ops import roi_align

from .core import DatasetProfile, from_uint8, to_uint8

RATIO = (3.0 / 4.0, 4.0 / 3.0)
_ATTEMPTS = 10


def sample_crop_box(height: int, width: int, scale: tuple[float, float], generator: torch.Generator,
                    ratio: tuple[float, float] = RATIO) -> tuple[int, int, int, int]:
    """Random-resized-crop box ``(x, y, w, h)`` drawn from ``generator``.

    Same acceptance rule as torchvision's ``RandomResizedCrop.get_params``
    (ten attempts, then a ratio-clamped center crop), but every draw comes
    from the supplied generator instead of the global RNG.
    """
    boxes = sample_crop_boxes(1, height, width, scale, generator, ratio)
    return tuple(int(v) for v in boxes[0])


def sample_crop_boxes(n: int, height: int, width: int, scale: tuple[float, float],
                      generator: torch.Generator, ratio: tuple[float, float] = RATIO) -> torch.Tensor:
    """Vectorised :func:`sample_crop_box`; returns an ``n×4`` long tensor of ``(x, y, w, h)``."""
    area = height * width
    u_area = torch.rand(n, _ATTEMPTS, generator=generator, dtype=torch.float64)
    u_ratio = torch.rand(n, _ATTEMPTS, generator=generator, dtype=torch.float64)
    u_off = torch.rand(n, 2, generator=generator, dtype=torch.float64)

    target = area * (scale[0] + (scale[1] - scale[0]) * u_area)
    log_lo, log_hi = math.log(ratio[0]), math.log(ratio[1])
    aspect = torch.exp(log_lo + (log_hi - log_lo) * u_ratio)
    w = torch.round(torch.sqrt(target * aspect)).long()
    h = torch.round(torch.sqrt(target / aspect)).long()
    ok = (w > 0) & (w <= width) & (h > 0) & (h <= height)

    # fallback: whole image, clamped to the ratio range, centered
    in_ratio = width / height
    if in_ratio < ratio[0]:
        fw, fh = width, int(round(width / ratio[0]))
    elif in_ratio > ratio[1]:
        fh, fw = height, int(round(height * ratio[1]))
    else:
        fw, fh = width, height

    any_ok = ok.any(dim=1)
    first = torch.argmax(ok.to(torch.int8), dim=1)
    rows = torch.arange(n)
    bw = torch.where(any_ok, w[rows, first], torch.full((n,), fw))
    bh = torch.where(any_ok, h[rows, first], torch.full((n,), fh))
    by = torch.where(any_ok, torch.floor(u_off[:, 0] * (height - bh + 1)).long(),
                     torch.full((n,), (height - fh) // 2))
    bx = torch.where(any_ok, torch.floor(u_off[:, 1] * (width - bw + 1)).long(),
                     torch.full((n,), (width - fw) // 2))
    return torch.stack([bx, by, bw, bh], dim=1)


def crop_resize(image: torch.Tensor, box: tuple[int, int, int, int], size: int) -> torch.Tensor:
    """Crop ``C×H×W`` to ``box`` and resize bilinearly (antialiased) to ``size×size``."""
    x, y, w, h = box
    crop = image[:, y:y + h, x:x + w].unsqueeze(0)
    if crop.shape[-2:] == (size, size):
        return crop[0].clone()
    return F.interpolate(crop, size=(size, size), mode="bilinear", align_corners=False, antialias=True)[0]


def batch_crop_resize(images: torch.Tensor, boxes: torch.Tensor, size: int) -> torch.Tensor:
    """Differentiable per-image crop + bilinear resize of an ``N×C×H×W`` batch."""
    boxes = boxes.to(images.dtype)
    rois = torch.cat(
        [
            torch.arange(len(images), dtype=images.dtype).unsqueeze(1),
            boxes[:, 0:1],
            boxes[:, 1:2],
            boxes[:, 0:1] + boxes[:, 2:3],
            boxes[:, 1:2] + boxes[:, 3:4],
        ],
        dim=1,
    )
    return roi_align(images, rois, output_size=(size, size), spatial_scale=1.0, sampling_ratio=2, aligned=True)


def random_flip(images: torch.Tensor, generator: torch.Generator, p: float = 0.5) -> torch.Tensor:
    flip = torch.rand(len(images), generator=generator) < p
    if not flip.any():
        return images
    out = images.clone()
    out[flip] = out[flip].flip(-1)
    return out


@contextlib.contextmanager
def _python_random_state(seed: int):
    # timm's RandAugment draws from the module-level ``random``; give it a
    # private seeded stream and restore the caller's state afterwards.
    saved_py = random.getstate()
    saved_np = np.random.get_state()
    random.seed(seed)
    np.random.seed(seed % (2**32))
    try:
        yield
    finally:
        random.setstate(saved_py)
        np.random.set_state(saved_np)


class RandAugmentBatch:
    """timm RandAugment (``rand-m{m}-n{n}-mstd{mstd}``) over a normalized tensor batch."""

    def __init__(self, profile: DatasetProfile):
        from timm.data.auto_augment import rand_augment_transform

        self.profile = profile
        ra_config = f"rand-m{profile.randaugment_m:g}-n{profile.randaugment_n}-mstd{profile.randaugment_mstd:g}"
        fill = tuple(int(round(255 * m)) for m in profile.channel_mean)
        self.transform = rand_augment_transform(ra_config, {"img_mean": fill if len(fill) == 3 else fill[0]})

    def __call__(self, images: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
        seed = int(torch.randint(0, 2**62, (1,), generator=generator))
        out = []
        with _python_random_state(seed):
            for img in images:
                arr = to_uint8(img, self.profile)
                pil = Image.fromarray(arr[:, :, 0], "L") if arr.shape[2] == 1 else Image.fromarray(arr, "RGB")
                res = np.asarray(self.transform(pil))
                if res.ndim == 2:
                    res = res[:, :, None]
                out.append(from_uint8(res, self.profile))
        return torch.stack(out).to(images.device)
