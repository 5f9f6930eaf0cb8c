"""Frozen teacher: training ("squeeze"), loading, and statistics-capturing forward."""

from __future__ import annotations

import hashlib
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import batch_crop_resize, random_flip, sample_crop_boxes
from .core import DatasetProfile
from .models import build_model

log = logging.getLogger(__name__)

BN_TYPES = (nn.BatchNorm1d, nn.BatchNorm2d, nn.BatchNorm3d)


class TeacherError(ValueError):
    pass


class ForwardOutput(NamedTuple):
    logits: torch.Tensor
    # (mean, biased variance) of the input to each BN layer, forward order
    bn_stats: list[tuple[torch.Tensor, torch.Tensor]]
    features: torch.Tensor


@dataclass(eq=False)
class TeacherSnapshot:
    arch: str
    model: nn.Module
    num_classes: int
    profile: DatasetProfile | None = None
    info: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self._bn_modules = [m for m in self.model.modules() if isinstance(m, BN_TYPES)]
        if not self._bn_modules:
            raise TeacherError("batch-to-global matching requires normalization statistics "
                               f"(architecture {self.arch!r} has no BatchNorm layers)")
        for i, m in enumerate(self._bn_modules):
            if m.running_var is None or m.running_mean is None:
                raise TeacherError(f"BN layer {i} does not track running statistics")
            if not bool((m.running_var > 0).all()):
                raise TeacherError(f"BN layer {i} has non-positive running variance")
        self._classifier = _last_linear(self.model)
        self._bn_layers = [(m.running_mean.detach().clone(), m.running_var.detach().clone())
                           for m in self._bn_modules]

    @property
    def bn_layers(self) -> list[tuple[torch.Tensor, torch.Tensor]]:
        """(running_mean, running_var) per BN layer in forward order."""
        return [(rm.clone(), rv.clone()) for rm, rv in self._bn_layers]

    @property
    def num_bn_layers(self) -> int:
        return len(self._bn_modules)

    def parameter_digest(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.model.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def to(self, device) -> "TeacherSnapshot":
        self.model.to(device)
        self._bn_layers = [(rm.to(device), rv.to(device)) for rm, rv in self._bn_layers]
        return self

    @property
    def device(self) -> torch.device:
        return next(self.model.parameters()).device

    def save(self, path: str | os.PathLike) -> None:
        torch.save(
            {
                "arch": self.arch,
                "num_classes": self.num_classes,
                "profile": self.profile.to_dict() if self.profile else None,
                "info": self.info,
                "state_dict": self.model.state_dict(),
            },
            path,
        )


def _last_linear(model: nn.Module) -> nn.Linear:
    linears = [m for m in model.modules() if isinstance(m, nn.Linear)]
    if not linears:
        raise TeacherError("model has no linear classifier to take penultimate features from")
    return linears[-1]


def load_teacher(path: str | os.PathLike, arch: str | None = None,
                 profile: DatasetProfile | None = None) -> TeacherSnapshot:
    """Load a checkpoint written by :meth:`TeacherSnapshot.save` (or a bare state dict)."""
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if isinstance(ckpt, dict) and "state_dict" in ckpt:
        arch = arch or ckpt["arch"]
        if profile is None and ckpt.get("profile"):
            profile = DatasetProfile.from_dict(ckpt["profile"])
        state, info = ckpt["state_dict"], ckpt.get("info", {})
    else:
        state, info = ckpt, {}
    if arch is None or profile is None:
        raise TeacherError("architecture and profile are required to load a bare state dict")
    model = build_model(arch, profile.num_classes, profile.resolution, profile.channels)
    model.load_state_dict(state)
    return TeacherSnapshot(arch, model, profile.num_classes, profile, dict(info))


def forward(snapshot: TeacherSnapshot, batch: torch.Tensor, capture_stats: bool = True) -> ForwardOutput:
    """Run the frozen teacher in inference mode.

    When ``capture_stats`` is set, the per-channel mean and biased variance of
    each BN layer's input are captured through pre-hooks; they stay attached to
    the autograd graph so gradients reach ``batch``.
    """
    if capture_stats and batch.shape[0] < 2:
        raise TeacherError("batch statistics need a batch of at least 2 images")
    stats: list[tuple[torch.Tensor, torch.Tensor]] = []
    feats: list[torch.Tensor] = []

    def bn_hook(module, inputs):
        x = inputs[0]
        dims = [0] + list(range(2, x.dim()))
        mean = x.mean(dim=dims)
        var = x.var(dim=dims, unbiased=False)
        stats.append((mean, var))

    def fc_hook(module, inputs):
        feats.append(inputs[0])

    handles = [snapshot._classifier.register_forward_pre_hook(fc_hook)]
    if capture_stats:
        handles += [m.register_forward_pre_hook(bn_hook) for m in snapshot._bn_modules]
    try:
        logits = snapshot.model(batch)
    finally:
        for h in handles:
            h.remove()
    return ForwardOutput(logits, stats, feats[-1].flatten(1))


@torch.no_grad()
def predict(model: nn.Module, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    was_training = model.training
    model.eval()
    device = next(model.parameters()).device
    out = [model(images[i:i + batch_size].to(device)).cpu() for i in range(0, len(images), batch_size)]
    model.train(was_training)
    return torch.cat(out)


def accuracy(model: nn.Module, images: torch.Tensor, labels: torch.Tensor, batch_size: int = 256) -> float:
    if len(images) == 0:
        raise ValueError("empty split")
    preds = predict(model, images, batch_size).argmax(1)
    return float((preds == labels.cpu()).float().mean())


def squeeze(
    train_images: torch.Tensor,
    train_labels: torch.Tensor,
    arch: str,
    profile: DatasetProfile,
    epochs: int,
    seed: int = 0,
    val_images: torch.Tensor | None = None,
    val_labels: torch.Tensor | None = None,
    batch_size: int = 128,
    lr: float = 0.1,
    weight_decay: float = 5e-4,
    flip: bool = True,
    device: str | torch.device = "cpu",
) -> TeacherSnapshot:
    """Train a teacher from scratch on normalized ``train_images``.

    SGD with momentum and cosine decay, random-resized-crop (scale 0.5-1) and
    optional horizontal-flip augmentation. Deterministic for a fixed seed and device.
    """
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    model = build_model(arch, profile.num_classes, profile.resolution, profile.channels).to(device)
    if not any(isinstance(m, BN_TYPES) for m in model.modules()):
        raise TeacherError("batch-to-global matching requires normalization statistics")
    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=0.9, weight_decay=weight_decay, nesterov=True)
    n = len(train_images)
    steps_per_epoch = max(1, math.ceil(n / batch_size))
    total = epochs * steps_per_epoch
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + math.cos(math.pi * s / max(1, total))))
    res = profile.resolution
    for epoch in range(epochs):
        model.train()
        perm = torch.randperm(n, generator=gen)
        running = 0.0
        for i in range(0, n, batch_size):
            idx = perm[i:i + batch_size]
            if len(idx) < 2:
                continue
            x = train_images[idx]
            boxes = sample_crop_boxes(len(x), res, res, (0.5, 1.0), gen)
            x = batch_crop_resize(x, boxes, res)
            if flip:
                x = random_flip(x, gen)
            x = x.to(device)
            y = train_labels[idx].to(device)
            loss = F.cross_entropy(model(x), y)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            running += loss.item() * len(idx)
        log.info("squeeze %s epoch %d/%d loss %.4f", arch, epoch + 1, epochs, running / n)

    model.eval()
    info: dict[str, Any] = {"epochs": epochs, "seed": seed}
    if epochs > 0 or len(train_images):
        info["train_top1"] = accuracy(model, train_images, train_labels)
    if val_images is not None and val_labels is not None and len(val_images):
        info["val_top1"] = accuracy(model, val_images, val_labels)
    log.info("squeeze %s done: %s", arch, info)
    return TeacherSnapshot(arch, model.cpu(), profile.num_classes, profile, info)
