"""End-to-end wiring: rank patches, build initial images, run grouped recovery, assemble the dataset."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import torch

from .core import DistilledDataset, RecoveryConfig, save_distilled, validate_recovery_config
from .data import LabeledSplit
from .initializer import initial_images
from .patches import PatchPool, build_pool, default_crops_per_image, score_pool, select_and_order
from .recovery import RecoveryResult, group_classes, make_job, run_baseline_recovery, run_recovery
from .schedule import schedule_for, total_image_iterations
from .teacher import TeacherSnapshot

log = logging.getLogger(__name__)

POOL_CROP_SCALE = (0.08, 1.0)


def _class_seed(seed: int, class_id: int) -> int:
    return seed * 1_000_003 + class_id


def rank_pools(split: LabeledSplit, teacher: TeacherSnapshot, config: RecoveryConfig,
               crops_per_image: int | None = None) -> dict[int, PatchPool]:
    """Scored crop pool for every class of ``split``."""
    profile = split.profile
    pools = {}
    for c in range(profile.num_classes):
        idx = split.class_indices(c)
        if len(idx) == 0:
            raise ValueError(f"class {c} has no training images")
        k = crops_per_image or default_crops_per_image(len(idx), config.ipc, config.mosaic_grid)
        pool = build_pool(split.images[idx], c, k, POOL_CROP_SCALE, _class_seed(config.seed, c),
                          profile.resolution, source_ids=idx.tolist())
        pools[c] = score_pool(pool, teacher, profile)
    return pools


def initial_by_class(profile, config: RecoveryConfig, pools: dict[int, PatchPool] | None = None):
    out = {}
    per = config.mosaic_grid ** 2
    for c in range(profile.num_classes):
        seed = _class_seed(config.seed, c)
        if config.init_mode == "real_patch":
            if pools is None:
                raise ValueError("real-patch initialization needs ranked pools")
            chosen = select_and_order(pools[c], config.ipc * per, config.selection, config.ordering, seed)
            out[c] = initial_images(profile, config.ipc, "real_patch", chosen, config.mosaic_grid)
        else:
            out[c] = initial_images(profile, config.ipc, "gaussian", seed=seed)
    return out


def run_id(config: RecoveryConfig, teacher: TeacherSnapshot, extra: dict | None = None) -> str:
    doc = {"config": config.to_dict(), "teacher": teacher.parameter_digest(), "extra": extra or {}}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class DistillOutput:
    dataset: DistilledDataset
    results: list[RecoveryResult]
    digest: str | None = None

    @property
    def wall_seconds(self) -> float:
        return sum(r.wall_seconds for r in self.results)

    @property
    def image_iterations(self) -> int:
        """Summed over all classes."""
        return sum(r.image_iterations * len({s.class_id for s in r.samples}) for r in self.results)


def distill(
    teacher: TeacherSnapshot,
    config: RecoveryConfig,
    pools: dict[int, PatchPool] | None = None,
    out: str | os.PathLike | None = None,
    workers: int = 1,
    force: bool = False,
    baseline: bool = False,
    soft_labels: bool = False,
    extra_metadata: dict | None = None,
) -> DistillOutput:
    """Synthesize a distilled set for every class of the teacher's profile.

    Classes are split into groups that each fill one synthesis batch; groups
    run as independent jobs on up to ``workers`` threads. With ``out`` the
    dataset is saved there and per-group iteration logs go to ``out/logs``.
    ``baseline`` swaps in the constant-iteration reference loop (M must be 1).
    """
    validate_recovery_config(config)
    profile = teacher.profile
    if profile is None:
        raise ValueError("teacher has no dataset profile")
    if baseline and config.num_subbatches != 1:
        raise ValueError("the constant-iteration baseline needs num_subbatches=1")
    if out is not None:
        out = Path(out)
        if out.exists() and any(out.iterdir()) and not force:
            raise FileExistsError(f"{out} exists; pass force to overwrite")

    init = initial_by_class(profile, config, pools)
    groups = group_classes(profile.num_classes, config)
    jobs = [make_job(g, init, config, seed_offset=i) for i, g in enumerate(groups)]
    log_dir = Path(tempfile.mkdtemp(prefix="delt-logs-")) if out is not None else None

    def run(i):
        job = jobs[i]
        if baseline:
            return run_baseline_recovery(job, teacher, config)
        path = log_dir / f"group_{i:04d}.jsonl" if log_dir else None
        return run_recovery(job, teacher, config, log_path=path)

    try:
        if workers > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(run, range(len(jobs))))
        else:
            results = [run(i) for i in range(len(jobs))]

        samples = [s for r in results for s in r.samples]
        meta = {
            "ipc": config.ipc,
            "method": "baseline" if baseline else "delt",
            "recovery_config": config.to_dict(),
            "teacher": {"arch": teacher.arch, "digest": teacher.parameter_digest()},
            "groups": [list(g) for g in groups],
            "image_iterations": total_image_iterations(schedule_for(config)) * profile.num_classes,
            "run_id": run_id(config, teacher, extra_metadata),
            **(extra_metadata or {}),
        }
        dataset = DistilledDataset(profile, tuple(samples), meta)
        dataset.validate()
        output = DistillOutput(dataset, results)
        if out is not None:
            labels = None
            if soft_labels:
                from .relabel import dataset_soft_labels

                labels = dataset_soft_labels(dataset, teacher)
            output.digest = save_distilled(dataset, out, labels, overwrite=force)
            if any(log_dir.iterdir()):
                shutil.move(str(log_dir), str(out / "logs"))
    finally:
        if log_dir is not None and log_dir.exists():
            shutil.rmtree(log_dir, ignore_errors=True)
    return output


def set_deterministic(seed: int | None = None) -> None:
    torch.use_deterministic_algorithms(True, warn_only=True)
    if seed is not None:
        torch.manual_seed(seed)
