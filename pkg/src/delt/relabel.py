"""Post-validation: train a fresh student on distilled images with teacher soft labels."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .augment import RandAugmentBatch, batch_crop_resize, random_flip, sample_crop_boxes
from .core import DatasetProfile, DistilledDataset, EvalConfig, SyntheticSample
from .models import build_model
from .teacher import TeacherSnapshot, accuracy, forward

log = logging.getLogger(__name__)


@torch.no_grad()
def soft_labels(teacher: TeacherSnapshot, augmented_batch: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax of the teacher's logits (temperature 1)."""
    logits = forward(teacher, augmented_batch.to(teacher.device), capture_stats=False).logits
    return F.softmax(logits.float(), dim=1)


def soft_cross_entropy(student_logits: torch.Tensor, target_probs: torch.Tensor) -> torch.Tensor:
    return -(target_probs * F.log_softmax(student_logits, dim=1)).sum(dim=1).mean()


def dataset_soft_labels(distilled: DistilledDataset, teacher: TeacherSnapshot) -> dict[int, np.ndarray]:
    """Per-class ``ipc × num_classes`` soft labels of the un-augmented images, for the ``labels/`` files."""
    probs = soft_labels(teacher, distilled.images()).cpu().numpy()
    out: dict[int, np.ndarray] = {}
    for row, s in zip(probs, distilled.samples):
        out.setdefault(s.class_id, np.zeros((distilled.ipc, distilled.profile.num_classes), np.float32))
        out[s.class_id][s.ipc_index] = row
    return out


class Augmenter:
    """Applies ``config.augmentations`` in order, drawing all randomness from a generator."""

    def __init__(self, config: EvalConfig, profile: DatasetProfile):
        self.config = config
        self.profile = profile
        self.randaug = RandAugmentBatch(profile) if "rand_augment" in config.augmentations else None

    def __call__(self, images: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
        res = self.profile.resolution
        for aug in self.config.augmentations:
            if aug == "rand_augment":
                images = self.randaug(images, gen)
            elif aug == "random_resized_crop":
                scale = (self.config.crop_scale_min, self.config.crop_scale_max)
                boxes = sample_crop_boxes(len(images), res, res, scale, gen)
                images = batch_crop_resize(images, boxes, res)
            elif aug == "random_horizontal_flip":
                images = random_flip(images, gen)
        return images


@dataclass
class PostTrainResult:
    student: nn.Module
    curve: list[tuple[int, float]] = field(default_factory=list)  # (epoch, val top-1)
    losses: list[float] = field(default_factory=list)  # mean loss per epoch

    @property
    def final_top1(self) -> float | None:
        return self.curve[-1][1] if self.curve else None


def post_train(
    distilled: DistilledDataset,
    student_arch: str,
    teacher: TeacherSnapshot,
    config: EvalConfig,
    val_images: torch.Tensor | None = None,
    val_labels: torch.Tensor | None = None,
    eval_every: int = 0,
) -> PostTrainResult:
    """Train ``student_arch`` from scratch on the distilled set only.

    Each step augments a batch once; teacher and student both see that exact
    tensor. Loss is soft cross-entropy against the teacher's softmax. AdamW
    with per-epoch cosine decay. If validation data is given, top-1 is
    recorded every ``eval_every`` epochs (0: only at the end).
    """
    profile = distilled.profile
    if teacher.num_classes != profile.num_classes:
        raise ValueError(f"teacher has {teacher.num_classes} classes, distilled set {profile.num_classes}")
    if teacher.profile is not None and teacher.profile.image_shape != profile.image_shape:
        raise ValueError("teacher profile does not match distilled images")
    device = teacher.device
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    student = build_model(student_arch, profile.num_classes, profile.resolution, profile.channels).to(device)
    opt = torch.optim.AdamW(student.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    epochs = config.epochs
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda e: 0.5 * (1 + math.cos(math.pi * e / max(1, epochs))))
    augment = Augmenter(config, profile)

    images = distilled.images()
    n = len(images)
    result = PostTrainResult(student)
    for epoch in range(epochs):
        student.train()
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for i in range(0, n, config.batch_size):
            idx = perm[i:i + config.batch_size]
            x = augment(images[idx], gen).to(device)
            target = soft_labels(teacher, x)
            loss = soft_cross_entropy(student(x), target)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        sched.step()
        result.losses.append(total / n)
        last = epoch + 1 == epochs
        if val_images is not None and (last or (eval_every and (epoch + 1) % eval_every == 0)):
            acc = evaluate_top1(student, val_images, val_labels)
            result.curve.append((epoch + 1, acc))
            log.info("post-train %s epoch %d/%d loss %.4f top1 %.4f", student_arch, epoch + 1, epochs,
                     total / n, acc)
    if epochs == 0 and val_images is not None:
        result.curve.append((0, evaluate_top1(student, val_images, val_labels)))
    student.eval()
    return result


def evaluate_top1(student: nn.Module, val_images: torch.Tensor, val_labels: torch.Tensor,
                  batch_size: int = 256) -> float:
    """Fraction of argmax-correct predictions on normalized, un-augmented validation images."""
    if val_images is None or len(val_images) == 0:
        raise ValueError("empty validation split")
    return accuracy(student, val_images, val_labels, batch_size)


def random_real_subset(images: torch.Tensor, labels: torch.Tensor, profile: DatasetProfile, ipc: int,
                       seed: int = 0) -> DistilledDataset:
    """Equal-size baseline arm: ``ipc`` uniformly drawn real images per class.

    ``images`` are uint8 or [0, 1] pixels; stored normalized and 8-bit quantized
    like distilled images.
    """
    rng = np.random.default_rng(seed)
    pix = images.to(torch.float32) / 255.0 if images.dtype == torch.uint8 else images.to(torch.float32)
    samples = []
    for c in range(profile.num_classes):
        idx = torch.nonzero(labels == c).flatten().numpy()
        if len(idx) < ipc:
            raise ValueError(f"class {c} has {len(idx)} images, need {ipc}")
        for i, j in enumerate(sorted(rng.choice(idx, size=ipc, replace=False))):
            img = torch.round(pix[j] * 255) / 255
            samples.append(SyntheticSample(profile.normalize(img), c, i, 0, 0, f"real:{int(j)}"))
    return DistilledDataset(profile, tuple(samples), {"ipc": ipc, "method": "random_real", "seed": seed})


def append_result(path: str | os.PathLike, record: dict) -> None:
    """Append one results record as a JSON line."""
    with open(path, "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def read_results(path: str | os.PathLike) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
