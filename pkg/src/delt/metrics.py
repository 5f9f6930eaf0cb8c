"""Intra-class diversity and synthesis cost summaries."""

from __future__ import annotations

import csv
import logging
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .core import DistilledDataset, RecoveryConfig
from .recovery import IterationRecord, read_iteration_log
from .schedule import schedule_for, total_image_iterations
from .teacher import TeacherSnapshot, forward

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ diversity

@dataclass
class DiversityReport:
    per_class: dict[int, float]
    excluded: int = 0  # zero-norm feature vectors skipped

    @property
    def mean(self) -> float:
        return sum(self.per_class.values()) / len(self.per_class)


def diversity_from_features(features: torch.Tensor, labels: torch.Tensor) -> DiversityReport:
    """Per class: mean cosine similarity of each feature vector to the class mean vector.

    Lower is more diverse. Zero-norm vectors are dropped with a warning.
    """
    features = features.detach().to(torch.float64).flatten(1)
    labels = labels.detach().cpu()
    per_class, excluded = {}, 0
    for c in sorted(set(labels.tolist())):
        f = features[labels == c]
        if len(f) < 2:
            raise ValueError(f"class {c}: diversity needs at least 2 samples, got {len(f)}")
        nonzero = torch.linalg.vector_norm(f, dim=1) > 0
        if not bool(nonzero.any()):
            raise ValueError(f"class {c}: all feature vectors are zero")
        if not bool(nonzero.all()):
            n = int((~nonzero).sum())
            warnings.warn(f"class {c}: excluding {n} zero-norm feature vector(s)", RuntimeWarning, stacklevel=2)
            excluded += n
            f = f[nonzero]
        centroid = f.mean(dim=0)
        cnorm = torch.linalg.vector_norm(centroid)
        if float(cnorm) == 0.0:
            raise ValueError(f"class {c}: class centroid is the zero vector")
        # exact cosine: the functional version clamps tiny norms to eps
        cos = (f @ centroid) / (torch.linalg.vector_norm(f, dim=1) * cnorm)
        per_class[int(c)] = float(cos.mean())
    if not per_class:
        raise ValueError("no samples")
    return DiversityReport(per_class, excluded)


@torch.no_grad()
def extract_features(extractor: TeacherSnapshot, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Penultimate (pre-classifier) features of un-augmented images."""
    out = []
    for i in range(0, len(images), batch_size):
        chunk = images[i:i + batch_size].to(extractor.device)
        out.append(forward(extractor, chunk, capture_stats=False).features.cpu())
    return torch.cat(out)


def diversity_score(distilled: DistilledDataset, extractor: TeacherSnapshot) -> DiversityReport:
    if extractor.profile is not None and extractor.profile.image_shape != distilled.profile.image_shape:
        raise ValueError("extractor profile does not match the distilled images")
    return diversity_from_features(extract_features(extractor, distilled.images()), distilled.labels())


# ----------------------------------------------------------------------- cost

@dataclass
class RunLog:
    """Iteration logs of one synthesis run (one entry per class-group job)."""

    name: str
    config: RecoveryConfig
    profile: str | None
    groups: list[tuple[tuple[int, ...], list[IterationRecord]]] = field(default_factory=list)
    wall_hours: float | None = None  # measured total; defaults to the summed iteration times

    @classmethod
    def from_files(cls, name: str, paths: Sequence[str | os.PathLike]) -> "RunLog":
        if not paths:
            raise ValueError(f"run {name!r}: no log files")
        run = None
        for p in sorted(paths):
            header, recs = read_iteration_log(p)
            cfg = RecoveryConfig.from_dict(header["config"])
            if run is None:
                run = cls(name, cfg, header.get("profile"))
            elif cfg != run.config or header.get("profile") != run.profile:
                raise ValueError(f"run {name!r}: {p} has a different config or profile")
            run.groups.append((tuple(header["class_ids"]), recs))
        return run

    @property
    def num_classes(self) -> int:
        return sum(len(ids) for ids, _ in self.groups)

    def image_iterations(self) -> int:
        """Image-iterations over all classes, from the per-iteration log column."""
        return sum(len(ids) * sum(r.image_iterations for r in recs) for ids, recs in self.groups)

    def hours(self) -> float:
        if self.wall_hours is not None:
            return self.wall_hours
        return sum(r.wall_ms for _, recs in self.groups for r in recs) / 3.6e6


@dataclass(frozen=True)
class CostRow:
    name: str
    ipc: int
    num_subbatches: int
    max_iterations: int
    round_iterations: int
    image_iterations: int
    wall_hours: float
    reduction_pct: float  # vs the baseline row; positive means cheaper


def cost_report(logs: Sequence[RunLog], baseline: int | str = 0) -> list[CostRow]:
    """Tabulate measured cost per run and the relative reduction vs ``baseline``.

    Every group's logged image-iterations must equal the schedule's closed form.
    """
    if not logs:
        raise ValueError("no logs")
    profiles = {r.profile for r in logs}
    if len(profiles) > 1:
        raise ValueError(f"logs come from different profiles: {sorted(map(str, profiles))}")
    if isinstance(baseline, str):
        names = [r.name for r in logs]
        if baseline not in names:
            raise ValueError(f"baseline {baseline!r} not among {names}")
        baseline = names.index(baseline)
    for run in logs:
        expected = total_image_iterations(schedule_for(run.config))
        for ids, recs in run.groups:
            got = sum(r.image_iterations for r in recs)
            if got != expected:
                raise ValueError(f"run {run.name!r}, classes {list(ids)[:4]}: logged {got} "
                                 f"image-iterations per class, closed form {expected}")
    base_hours = logs[baseline].hours()
    rows = []
    for run in logs:
        cfg = run.config
        h = run.hours()
        red = 100.0 * (base_hours - h) / base_hours if base_hours > 0 else 0.0
        rows.append(CostRow(run.name, cfg.ipc, cfg.num_subbatches, cfg.max_iterations, cfg.round_iterations,
                            run.image_iterations(), h, red))
    return rows


def format_cost_table(rows: Sequence[CostRow]) -> str:
    lines = [f"{'run':<20} {'IPC':>4} {'M':>3} {'MI':>6} {'RI':>5} {'image-iters':>12} {'hours':>9} {'vs base':>8}"]
    for r in rows:
        if r.reduction_pct > 0:
            delta = f"↓{r.reduction_pct:.1f}%"
        elif r.reduction_pct < 0:
            delta = f"↑{-r.reduction_pct:.1f}%"
        else:
            delta = "0.0%"
        lines.append(f"{r.name:<20} {r.ipc:>4} {r.num_subbatches:>3} {r.max_iterations:>6} "
                     f"{r.round_iterations:>5} {r.image_iterations:>12} {r.wall_hours:>9.3f} {delta:>8}")
    return "\n".join(lines)


# ------------------------------------------------------------ series / charts

def write_diversity_series(path: str | os.PathLike, reports: dict[str, DiversityReport]) -> None:
    """CSV with columns ``method,class,score``."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "class", "score"])
        for name, rep in reports.items():
            for c, s in sorted(rep.per_class.items()):
                w.writerow([name, c, f"{s:.6f}"])


def write_cost_series(path: str | os.PathLike, rows: Sequence[CostRow]) -> None:
    """CSV with columns ``method,ipc,hours,image_iterations``."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "ipc", "hours", "image_iterations"])
        for r in rows:
            w.writerow([r.name, r.ipc, f"{r.wall_hours:.6f}", r.image_iterations])


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_diversity(path: str | os.PathLike, reports: dict[str, DiversityReport]) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for name, rep in reports.items():
        cls = sorted(rep.per_class)
        ax.plot(cls, [rep.per_class[c] for c in cls], marker="o", ms=3, label=f"{name} (mean {rep.mean:.4f})")
    ax.set_xlabel("class")
    ax.set_ylabel("cosine similarity to centroid")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def plot_cost(path: str | os.PathLike, rows: Sequence[CostRow]) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    by_method: dict[str, list[CostRow]] = {}
    for r in rows:
        by_method.setdefault(r.name, []).append(r)
    for name, rs in by_method.items():
        rs = sorted(rs, key=lambda r: r.ipc)
        ax.plot([r.ipc for r in rs], [r.wall_hours for r in rs], marker="o", label=name)
    ax.set_xlabel("IPC")
    ax.set_ylabel("hours")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)
