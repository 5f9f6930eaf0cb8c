"""Synthesis loop: optimize synthetic images against the frozen teacher.

Loss per micro-batch is cross-entropy on the class labels plus ``alpha_bn``
times the BN distribution regularizer. Under the EarlyLate schedule, each
sub-batch's image variables are created when the sub-batch joins the loop and
then trained alongside the earlier ones until the loop ends.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .augment import batch_crop_resize, sample_crop_boxes
from .core import RecoveryConfig, SyntheticSample
from .schedule import EarlyLateSchedule, schedule_for, total_image_iterations
from .teacher import TeacherSnapshot, forward

log = logging.getLogger(__name__)


class RecoveryError(RuntimeError):
    pass


def bn_regularizer(batch_stats: Sequence[tuple[torch.Tensor, torch.Tensor]],
                   running_stats: Sequence[tuple[torch.Tensor, torch.Tensor]]) -> torch.Tensor:
    """``sum_l ||mu_l - RM_l||_2 + sum_l ||var_l - RV_l||_2``."""
    if len(batch_stats) != len(running_stats):
        raise ValueError(f"got statistics for {len(batch_stats)} layers, teacher has {len(running_stats)}")
    if not batch_stats:
        raise ValueError("no BN layers to regularize")
    total = None
    for layer, ((mu, var), (rm, rv)) in enumerate(zip(batch_stats, running_stats)):
        if mu.shape != rm.shape or var.shape != rv.shape:
            raise ValueError(f"BN layer {layer}: batch stats {tuple(mu.shape)}/{tuple(var.shape)} "
                             f"vs running stats {tuple(rm.shape)}/{tuple(rv.shape)}")
        term = torch.linalg.vector_norm(mu - rm, 2) + torch.linalg.vector_norm(var - rv, 2)
        total = term if total is None else total + term
    return total


def recovery_loss(logits: torch.Tensor, labels: torch.Tensor, bn_value: torch.Tensor | float,
                  alpha_bn: float) -> torch.Tensor:
    if logits.shape[0] != labels.shape[0]:
        raise ValueError(f"{logits.shape[0]} logit rows for {labels.shape[0]} labels")
    ce = F.cross_entropy(logits, labels)
    return ce + alpha_bn * bn_value


def cosine_lr(base_lr: float, step: int, total: int) -> float:
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total))


@dataclass
class RecoveryJob:
    """Slots for one class group: ``initial[(class_id, ipc_index)] = (image, provenance)``."""

    class_ids: tuple[int, ...]
    initial: Mapping[tuple[int, int], tuple[torch.Tensor, str]]
    schedule: EarlyLateSchedule
    seed: int = 0

    def __post_init__(self):
        self.class_ids = tuple(self.class_ids)
        missing = [(c, i) for c in self.class_ids for i in range(self.schedule.ipc) if (c, i) not in self.initial]
        if missing:
            raise ValueError(f"job lacks initial images for slots {missing[:5]}")

    def slots(self, subbatch: int) -> list[tuple[int, int]]:
        # ipc-major so a micro-batch spans classes
        entry = self.schedule.entries[subbatch]
        return [(c, i) for i in entry.slots for c in self.class_ids]


@dataclass
class IterationRecord:
    iteration: int
    active: list[int]
    loss: float
    ce: float
    bn: float
    wall_ms: float
    image_iterations: int  # per-class active images at this iteration


@dataclass
class RecoveryResult:
    samples: list[SyntheticSample]
    log: list[IterationRecord] = field(default_factory=list)
    wall_seconds: float = 0.0

    @property
    def image_iterations(self) -> int:
        return sum(r.image_iterations for r in self.log)


def make_job(class_ids: Sequence[int], initial_by_class: Mapping[int, Sequence[tuple[torch.Tensor, str]]],
             config: RecoveryConfig, seed_offset: int = 0) -> RecoveryJob:
    initial = {}
    for c in class_ids:
        images = initial_by_class[c]
        if len(images) != config.ipc:
            raise ValueError(f"class {c}: {len(images)} initial images for ipc={config.ipc}")
        for i, item in enumerate(images):
            initial[(c, i)] = item
    return RecoveryJob(tuple(class_ids), initial, schedule_for(config), config.seed + seed_offset)


def group_classes(num_classes: int, config: RecoveryConfig) -> list[list[int]]:
    """Round-robin class groups sized so one sub-batch of a group fills a synthesis batch."""
    largest = max(e.size for e in schedule_for(config).entries)
    per_group = max(1, config.synthesis_batch_size // largest)
    n_groups = math.ceil(num_classes / per_group)
    return [[c for c in range(num_classes) if c % n_groups == g] for g in range(n_groups)]


def _gather(params: Sequence[torch.Tensor], offsets: Sequence[int], start: int, stop: int) -> torch.Tensor:
    parts = []
    for p, off in zip(params, offsets):
        lo, hi = max(start, off), min(stop, off + len(p))
        if lo < hi:
            parts.append(p[lo - off:hi - off])
    return parts[0] if len(parts) == 1 else torch.cat(parts)


def _step_loss(teacher, running, labels, boxes, alpha_bn, res, batch_size, params, offsets):
    """Forward/backward every micro-batch of one iteration; returns (loss, ce, bn) means."""
    n = len(labels)
    tot = ce_tot = bn_tot = 0.0
    for s in range(0, n, batch_size):
        e = min(n, s + batch_size)
        x = batch_crop_resize(_gather(params, offsets, s, e), boxes[s:e], res)
        out = forward(teacher, x)
        bn = bn_regularizer(out.bn_stats, running)
        ce = F.cross_entropy(out.logits, labels[s:e])
        loss = ce + alpha_bn * bn
        if not torch.isfinite(loss):
            raise FloatingPointError
        loss.backward()
        w = (e - s) / n
        tot += loss.item() * w
        ce_tot += ce.item() * w
        bn_tot += bn.item() * w
    return tot, ce_tot, bn_tot


def _is_oom(err: RuntimeError) -> bool:
    return "out of memory" in str(err).lower()


def run_recovery(
    job: RecoveryJob,
    teacher: TeacherSnapshot,
    config: RecoveryConfig,
    log_path: str | os.PathLike | None = None,
    callback: Callable[[int, list[nn.Parameter]], None] | None = None,
) -> RecoveryResult:
    """Run the shared EarlyLate loop for one class group.

    ``callback(t, params)`` is invoked after each optimizer step with the
    image variables that exist at iteration ``t``.
    """
    sched = job.schedule
    if (sched.ipc, sched.num_subbatches, sched.max_iterations, sched.round_iterations) != (
        config.ipc, config.num_subbatches, config.max_iterations, config.round_iterations
    ):
        raise ValueError("job schedule does not match the recovery config")
    device = teacher.device
    res = teacher.profile.resolution if teacher.profile else next(iter(job.initial.values()))[0].shape[-1]
    running = [(rm.to(device), rv.to(device)) for rm, rv in teacher.bn_layers]
    gen = torch.Generator().manual_seed(job.seed)
    scale = (config.crop_scale_min, config.crop_scale_max)
    batch_size = config.synthesis_batch_size
    oom_retried = False

    params: list[nn.Parameter] = []
    offsets: list[int] = []
    labels: list[torch.Tensor] = []
    slot_order: list[list[tuple[int, int]]] = []
    opt: torch.optim.Adam | None = None
    records: list[IterationRecord] = []
    next_b = 0
    writer = open(log_path, "w") if log_path else None
    t_start = time.perf_counter()
    try:
        if writer:
            writer.write(json.dumps({"type": "header", "class_ids": list(job.class_ids),
                                     "config": config.to_dict(),
                                     "profile": teacher.profile.name if teacher.profile else None}) + "\n")
        for t in range(sched.max_iterations):
            t0 = time.perf_counter()
            while next_b < sched.num_subbatches and sched.entries[next_b].start == t:
                slots = job.slots(next_b)
                init = torch.stack([job.initial[s][0] for s in slots]).to(device, torch.float32)
                p = nn.Parameter(init.clone())
                offsets.append(sum(len(q) for q in params))
                params.append(p)
                labels.append(torch.tensor([c for c, _ in slots], device=device))
                slot_order.append(slots)
                if opt is None:
                    opt = torch.optim.Adam([p], lr=config.learning_rate,
                                           betas=(config.adam_beta1, config.adam_beta2))
                else:
                    opt.add_param_group({"params": [p], "lr": config.learning_rate})
                next_b += 1
            for g, entry in zip(opt.param_groups, sched.entries):
                g["lr"] = cosine_lr(config.learning_rate, t - entry.start, entry.length)

            y = labels[0] if len(labels) == 1 else torch.cat(labels)
            boxes = sample_crop_boxes(len(y), res, res, scale, gen).to(device)
            while True:
                opt.zero_grad(set_to_none=True)
                try:
                    loss, ce, bn = _step_loss(teacher, running, y, boxes, config.alpha_bn, res,
                                              batch_size, params, offsets)
                    break
                except FloatingPointError:
                    raise RecoveryError(f"non-finite loss at iteration {t}") from None
                except RuntimeError as e:
                    if not _is_oom(e) or oom_retried or batch_size == 1:
                        raise
                    oom_retried = True
                    batch_size = max(1, batch_size // 2)
                    log.warning("out of memory at iteration %d; retrying with micro-batch %d", t, batch_size)
            opt.step()
            if callback is not None:
                callback(t, list(params))

            rec = IterationRecord(
                iteration=t,
                active=list(range(len(params))),
                loss=loss,
                ce=ce,
                bn=bn,
                wall_ms=(time.perf_counter() - t0) * 1000.0,
                image_iterations=sum(sched.entries[b].size for b in range(len(params))),
            )
            records.append(rec)
            if writer:
                writer.write(json.dumps({"type": "iter", **asdict(rec)}) + "\n")
    finally:
        if writer:
            writer.close()
    wall = time.perf_counter() - t_start

    samples = []
    for b, (p, slots) in enumerate(zip(params, slot_order)):
        entry = sched.entries[b]
        for img, (c, i) in zip(p.detach().cpu(), slots):
            samples.append(SyntheticSample(img, c, i, b, entry.length, job.initial[(c, i)][1]))
    result = RecoveryResult(samples, records, wall)
    expected = total_image_iterations(sched)
    if result.image_iterations != expected:
        raise RecoveryError(f"logged {result.image_iterations} image-iterations, schedule says {expected}")
    return result


def run_baseline_recovery(job: RecoveryJob, teacher: TeacherSnapshot, config: RecoveryConfig) -> RecoveryResult:
    """Constant-iteration reference loop: every image starts at 0 and trains ``max_iterations`` steps.

    Kept deliberately separate from :func:`run_recovery`; with a single
    sub-batch the two must agree bit for bit.
    """
    device = teacher.device
    res = teacher.profile.resolution if teacher.profile else next(iter(job.initial.values()))[0].shape[-1]
    running = [(rm.to(device), rv.to(device)) for rm, rv in teacher.bn_layers]
    gen = torch.Generator().manual_seed(job.seed)
    scale = (config.crop_scale_min, config.crop_scale_max)
    slots = [(c, i) for i in range(job.schedule.ipc) for c in job.class_ids]
    x = nn.Parameter(torch.stack([job.initial[s][0] for s in slots]).to(device, torch.float32).clone())
    y = torch.tensor([c for c, _ in slots], device=device)
    opt = torch.optim.Adam([x], lr=config.learning_rate, betas=(config.adam_beta1, config.adam_beta2))
    mi = config.max_iterations
    records = []
    t_start = time.perf_counter()
    for t in range(mi):
        t0 = time.perf_counter()
        opt.param_groups[0]["lr"] = cosine_lr(config.learning_rate, t, mi)
        boxes = sample_crop_boxes(len(y), res, res, scale, gen).to(device)
        opt.zero_grad(set_to_none=True)
        loss, ce, bn = _step_loss(teacher, running, y, boxes, config.alpha_bn, res,
                                  config.synthesis_batch_size, [x], [0])
        opt.step()
        records.append(IterationRecord(t, [0], loss, ce, bn, (time.perf_counter() - t0) * 1000.0,
                                       job.schedule.ipc))
    samples = [SyntheticSample(img, c, i, 0, mi, job.initial[(c, i)][1])
               for img, (c, i) in zip(x.detach().cpu(), slots)]
    return RecoveryResult(samples, records, time.perf_counter() - t_start)


def read_iteration_log(path: str | os.PathLike) -> tuple[dict, list[IterationRecord]]:
    header, recs = {}, []
    with open(path) as f:
        for line in f:
            d = json.loads(line)
            kind = d.pop("type")
            if kind == "header":
                header = d
            else:
                recs.append(IterationRecord(**d))
    return header, recs
