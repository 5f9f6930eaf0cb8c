"""Named end-to-end experiments run by ``delt reproduce``."""

from __future__ import annotations

import json
import logging
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .core import EvalConfig, RecoveryConfig, load_distilled
from .data import load_split
from .metrics import (RunLog, cost_report, diversity_score, format_cost_table, plot_cost, plot_diversity,
                      write_cost_series, write_diversity_series)
from .pipeline import distill, rank_pools
from .relabel import append_result, post_train, random_real_subset, read_results
from .teacher import load_teacher, squeeze

log = logging.getLogger(__name__)

# arm name -> recovery overrides; "random_real" is handled separately
ARMS = {
    "delt": {},
    "init_only": {"num_subbatches": 1},
    "gaussian_m1": {"num_subbatches": 1, "init_mode": "gaussian"},
}
ALL_ARMS = ("delt", "init_only", "gaussian_m1", "random_real")


@dataclass(frozen=True)
class Experiment:
    name: str
    dataset: str
    teacher_arch: str
    teacher_epochs: int
    student_arch: str
    recovery: RecoveryConfig
    eval_epochs: int = 300
    seeds: tuple[int, ...] = (0, 1, 2)
    arms: tuple[str, ...] = ALL_ARMS
    teacher_lr: float = 0.1
    teacher_flip: bool = True
    target_top1: float | None = None  # published reference, percent
    target_band: float = 3.0
    fallback_margin: float = 2.0
    earlylate_margin: float = 0.5


DESK_RECOVERY = RecoveryConfig(ipc=10, num_subbatches=8, max_iterations=4000, round_iterations=500,
                               alpha_bn=0.01, learning_rate=0.25)

EXPERIMENTS = {
    e.name: e
    for e in [
        Experiment("cifar10-ipc10", "cifar10", "resnet18", 200, "resnet18", DESK_RECOVERY, target_top1=43.0),
        Experiment("digits-ipc10", "digits", "convnet3_w32", 30, "convnet3_w32", DESK_RECOVERY,
                   teacher_flip=False),
        Experiment("digits-quick", "digits", "convnet3_w32", 10, "convnet3_w32",
                   DESK_RECOVERY.replace(max_iterations=400, round_iterations=50), eval_epochs=30, seeds=(0,),
                   teacher_flip=False),
    ]
}


def get_experiment(name: str) -> Experiment:
    try:
        return EXPERIMENTS[name]
    except KeyError:
        raise KeyError(f"unknown experiment {name!r}; known: {sorted(EXPERIMENTS)}") from None


def prepare_teacher(exp: Experiment, out: Path, train, val, device="cpu"):
    path = out / "teacher.pt"
    if path.exists():
        teacher = load_teacher(path)
        if teacher.arch == exp.teacher_arch and teacher.info.get("epochs") == exp.teacher_epochs:
            return teacher.to(device)
    teacher = squeeze(train.normalized(), train.labels, exp.teacher_arch, train.profile, exp.teacher_epochs,
                      seed=0, val_images=val.normalized(), val_labels=val.labels, lr=exp.teacher_lr,
                      flip=exp.teacher_flip, device=device)
    out.mkdir(parents=True, exist_ok=True)
    teacher.save(path)
    return teacher.to(device)


def _mean_std(xs):
    return (statistics.fmean(xs), statistics.stdev(xs) if len(xs) > 1 else 0.0)


@dataclass
class ExperimentReport:
    name: str
    teacher: dict
    top1: dict[str, list[float]] = field(default_factory=dict)  # arm -> per-seed top-1 (percent)
    diversity: dict[str, list[float]] = field(default_factory=dict)  # arm -> per-seed mean similarity
    hours: dict[str, list[float]] = field(default_factory=dict)
    image_iterations: dict[str, int] = field(default_factory=dict)
    checks: dict[str, dict] = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def evaluate_checks(exp: Experiment, rep: ExperimentReport) -> dict[str, dict]:
    """Pass/fail of the accuracy criteria available from the collected arms."""
    checks = {}
    top = {a: _mean_std(v)[0] for a, v in rep.top1.items() if v}
    if "delt" in top and exp.target_top1 is not None:
        gap = abs(top["delt"] - exp.target_top1)
        checks["target_band"] = {"delt": top["delt"], "target": exp.target_top1, "band": exp.target_band,
                                 "passed": gap <= exp.target_band}
    if {"delt", "random_real", "gaussian_m1"} <= top.keys():
        a, b = top["delt"] - top["random_real"], top["delt"] - top["gaussian_m1"]
        checks["fallback"] = {"vs_random_real": a, "vs_gaussian_m1": b, "margin": exp.fallback_margin,
                              "passed": a >= exp.fallback_margin and b >= exp.fallback_margin}
    if {"delt", "init_only"} <= top.keys():
        d = top["delt"] - top["init_only"]
        checks["earlylate_gain"] = {"gain": d, "margin": exp.earlylate_margin, "passed": d >= exp.earlylate_margin}
    div = {a: _mean_std(v)[0] for a, v in rep.diversity.items() if v}
    if {"delt", "init_only"} <= div.keys():
        rel = (div["init_only"] - div["delt"]) / div["init_only"]
        checks["diversity"] = {"delt": div["delt"], "init_only": div["init_only"], "relative_reduction": rel,
                               "passed": rel >= 0.01}
    hrs = {a: sum(v) for a, v in rep.hours.items() if v}
    if {"delt", "init_only"} <= hrs.keys():
        ratio = hrs["delt"] / hrs["init_only"]
        checks["wall_time"] = {"ratio": ratio, "passed": ratio <= 0.85}
    return checks


def run_experiment(
    exp: Experiment,
    out: str | Path,
    workers: int = 1,
    device: str = "cpu",
    seeds: tuple[int, ...] | None = None,
    arms: tuple[str, ...] | None = None,
    evaluate: bool = True,
    download: bool = False,
) -> ExperimentReport:
    """Squeeze (cached), then per seed synthesize every arm, post-train, and summarize.

    Finished arm directories are reused, so an interrupted run resumes.
    """
    out = Path(out)
    seeds = exp.seeds if seeds is None else tuple(seeds)
    arms = exp.arms if arms is None else tuple(arms)
    unknown = set(arms) - set(ALL_ARMS)
    if unknown:
        raise ValueError(f"unknown arms {sorted(unknown)}")
    train = load_split(exp.dataset, "train", download=download)
    val = load_split(exp.dataset, "val", download=download)
    teacher = prepare_teacher(exp, out, train, val, device)
    rep = ExperimentReport(exp.name, {"arch": teacher.arch, **teacher.info})
    results_path = out / "results.jsonl"
    done = {}
    if results_path.exists():
        for r in read_results(results_path):
            done[(r["arm"], r["seed"], r["student"], r["epochs"])] = r["top1"]
    val_x, val_y = val.normalized(), val.labels
    diversity_reports = {}
    cost_logs: dict[str, RunLog] = {}

    for seed in seeds:
        pools = None
        for arm in arms:
            arm_dir = out / f"seed{seed}" / arm
            if arm == "random_real":
                ds = random_real_subset(train.images, train.labels, train.profile, exp.recovery.ipc, seed)
            else:
                cfg = exp.recovery.replace(seed=seed, **ARMS[arm])
                if (arm_dir / "meta.json").exists():
                    ds = load_distilled(arm_dir)
                else:
                    if pools is None and cfg.init_mode == "real_patch":
                        pools = rank_pools(train, teacher, cfg)
                    ds = distill(teacher, cfg, pools, out=arm_dir, workers=workers, force=True,
                                 extra_metadata={"experiment": exp.name, "arm": arm}).dataset
                logs = sorted((arm_dir / "logs").glob("*.jsonl"))
                if logs:
                    run = RunLog.from_files(arm, logs)
                    rep.hours.setdefault(arm, []).append(run.hours())
                    rep.image_iterations[arm] = run.image_iterations()
                    if seed == seeds[0]:
                        cost_logs[arm] = run
                div = diversity_score(ds, teacher)
                rep.diversity.setdefault(arm, []).append(div.mean)
                if seed == seeds[0]:
                    diversity_reports[arm] = div
            key = (arm, seed, exp.student_arch, exp.eval_epochs)
            if evaluate and key in done:
                rep.top1.setdefault(arm, []).append(done[key])
            elif evaluate:
                ecfg = EvalConfig.for_run(exp.recovery.ipc, exp.student_arch, epochs=exp.eval_epochs, seed=seed)
                res = post_train(ds, exp.student_arch, teacher, ecfg, val_x, val_y)
                top1 = 100.0 * res.final_top1
                rep.top1.setdefault(arm, []).append(top1)
                append_result(results_path, {"experiment": exp.name, "dataset": exp.dataset, "ipc": exp.recovery.ipc,
                                             "arm": arm, "student": exp.student_arch, "seed": seed,
                                             "top1": top1, "epochs": exp.eval_epochs})
                log.info("%s seed %d arm %s: top-1 %.2f", exp.name, seed, arm, top1)

    rep.checks = evaluate_checks(exp, rep)
    if diversity_reports:
        write_diversity_series(out / "diversity.csv", diversity_reports)
        plot_diversity(out / "diversity.png", diversity_reports)
    if cost_logs:
        base = "init_only" if "init_only" in cost_logs else next(iter(cost_logs))
        rows = cost_report(list(cost_logs.values()), baseline=base)
        write_cost_series(out / "cost.csv", rows)
        plot_cost(out / "cost.png", rows)
        (out / "cost.txt").write_text(format_cost_table(rows) + "\n")
    (out / "summary.json").write_text(json.dumps(rep.to_dict(), indent=1, sort_keys=True))
    return rep
