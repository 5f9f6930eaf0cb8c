"""Labeled image splits: benchmark fetchers, class-folder loader and an offline desk proxy."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .core import DatasetProfile, get_profile

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "DELT_DATA_ROOT"
TINY_IMAGENET_URL = "http://cs231n.stanford.edu/tiny-imagenet-200.zip"


class DatasetUnavailable(RuntimeError):
    pass


@dataclass(frozen=True)
class LabeledSplit:
    """uint8 ``N×C×H×W`` images with integer labels."""

    images: torch.Tensor
    labels: torch.Tensor
    profile: DatasetProfile

    def __post_init__(self):
        if self.images.dtype != torch.uint8:
            raise TypeError("split images must be uint8")
        if len(self.images) != len(self.labels):
            raise ValueError("images/labels length mismatch")

    def __len__(self):
        return len(self.labels)

    def pixels(self, idx=None) -> torch.Tensor:
        imgs = self.images if idx is None else self.images[idx]
        return imgs.to(torch.float32) / 255.0

    def normalized(self, idx=None) -> torch.Tensor:
        return self.profile.normalize(self.pixels(idx))

    def class_indices(self, class_id: int) -> torch.Tensor:
        return torch.nonzero(self.labels == class_id).flatten()

    def subset(self, idx) -> "LabeledSplit":
        return LabeledSplit(self.images[idx], self.labels[idx], self.profile)


def data_root(root: str | os.PathLike | None = None) -> Path:
    return Path(root or os.environ.get(DATA_ROOT_ENV) or Path.home() / ".cache" / "delt")


def load_digits_split(split: str, val_fraction: float = 0.2) -> LabeledSplit:
    """scikit-learn's bundled 8×8 digits, bilinearly upsampled to 3×16×16.

    Ships with scikit-learn, so it is available offline; it stands in for the
    ten-class 32×32 benchmark when that cannot be fetched.
    """
    from sklearn.datasets import load_digits

    profile = get_profile("digits")
    d = load_digits()
    x = torch.from_numpy(d.images.astype(np.float32) / 16.0).unsqueeze(1)
    x = F.interpolate(x, size=(profile.resolution,) * 2, mode="bilinear", align_corners=False).clamp(0, 1)
    x = torch.round(x.repeat(1, profile.channels, 1, 1) * 255).to(torch.uint8)
    y = torch.from_numpy(d.target.astype(np.int64))
    # fixed stratified split
    rng = np.random.default_rng(0)
    val_mask = np.zeros(len(y), dtype=bool)
    for c in range(profile.num_classes):
        idx = np.flatnonzero(d.target == c)
        rng.shuffle(idx)
        val_mask[idx[: int(round(len(idx) * val_fraction))]] = True
    mask = torch.from_numpy(val_mask if split == "val" else ~val_mask)
    return LabeledSplit(x[mask], y[mask], profile)


def load_cifar10_split(split: str, root=None, download: bool = False) -> LabeledSplit:
    from torchvision.datasets import CIFAR10

    root = data_root(root) / "cifar10"
    try:
        ds = CIFAR10(str(root), train=(split == "train"), download=download)
    except RuntimeError as e:
        raise DatasetUnavailable(f"CIFAR-10 not found under {root} ({e}); run with download enabled "
                                 f"or set {DATA_ROOT_ENV}") from e
    x = torch.from_numpy(ds.data).permute(0, 3, 1, 2).contiguous()
    y = torch.tensor(ds.targets, dtype=torch.long)
    return LabeledSplit(x, y, get_profile("cifar10"))


def _load_rgb(path: Path, short_side: int, crop: int) -> torch.Tensor:
    with Image.open(path) as img:
        img = img.convert("RGB")
        w, h = img.size
        s = short_side / min(w, h)
        img = img.resize((max(crop, round(w * s)), max(crop, round(h * s))), Image.BILINEAR)
        w, h = img.size
        left, top = (w - crop) // 2, (h - crop) // 2
        img = img.crop((left, top, left + crop, top + crop))
        return torch.from_numpy(np.asarray(img).copy()).permute(2, 0, 1)


def load_image_folder(root: str | os.PathLike, profile: DatasetProfile, split: str) -> LabeledSplit:
    """Standard ``<root>/<class_name>/<image>`` layout; classes sorted by name.

    Validation images get resize(8/7·res)+center-crop(res). Training images
    keep the 8/7·res center square so ranking crops have context to draw from.
    """
    root = Path(root)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if len(classes) != profile.num_classes:
        raise DatasetUnavailable(f"{root}: found {len(classes)} classes, profile expects {profile.num_classes}")
    res = profile.resolution
    short = round(res * 8 / 7)
    crop = res if split == "val" else short
    xs, ys = [], []
    for c, name in enumerate(classes):
        for p in sorted((root / name).rglob("*")):
            if p.suffix.lower() in {".jpg", ".jpeg", ".png", ".bmp"}:
                xs.append(_load_rgb(p, short, crop))
                ys.append(c)
    if not xs:
        raise DatasetUnavailable(f"{root}: no images")
    return LabeledSplit(torch.stack(xs), torch.tensor(ys), profile)


def load_tiny_imagenet_split(split: str, root=None, download: bool = False) -> LabeledSplit:
    base = data_root(root) / "tiny-imagenet-200"
    if not base.exists() and download:
        from torchvision.datasets.utils import download_and_extract_archive

        download_and_extract_archive(TINY_IMAGENET_URL, str(base.parent))
    if not base.exists():
        raise DatasetUnavailable(f"Tiny-ImageNet not found under {base}")
    profile = get_profile("tiny_imagenet")
    wnids = sorted(p.name for p in (base / "train").iterdir() if p.is_dir())
    index = {w: i for i, w in enumerate(wnids)}
    xs, ys = [], []
    if split == "train":
        for w in wnids:
            for p in sorted((base / "train" / w / "images").glob("*.JPEG")):
                xs.append(_load_rgb(p, 64, 64))
                ys.append(index[w])
    else:
        for line in (base / "val" / "val_annotations.txt").read_text().splitlines():
            fname, wnid = line.split("\t")[:2]
            xs.append(_load_rgb(base / "val" / "images" / fname, 64, 64))
            ys.append(index[wnid])
    return LabeledSplit(torch.stack(xs), torch.tensor(ys), profile)


def load_split(name: str, split: str, root=None, download: bool = False) -> LabeledSplit:
    """Dispatch on profile name. ``split`` is ``"train"`` or ``"val"``."""
    if split not in ("train", "val"):
        raise ValueError(f"split must be 'train' or 'val', got {split!r}")
    if name == "digits":
        return load_digits_split(split)
    if name == "cifar10":
        return load_cifar10_split(split, root, download)
    if name == "tiny_imagenet":
        return load_tiny_imagenet_split(split, root, download)
    profile = get_profile(name)
    folder = data_root(root) / name / split
    if not folder.is_dir():
        raise DatasetUnavailable(f"expected class folders under {folder}")
    return load_image_folder(folder, profile, split)
