"""Command-line entry point.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .core import ConfigError, EvalConfig, RecoveryConfig, load_distilled, validate_recovery_config

log = logging.getLogger("delt")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _read_config(path: str | None, section: str) -> dict:
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    if section in doc:
        return dict(doc[section])
    # a flat document holds one section's keys
    return {} if "recovery" in doc or "eval" in doc else doc


def _overrides(pairs: list[str] | None) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def recovery_config_from_args(args) -> RecoveryConfig:
    d = _read_config(args.config, "recovery")
    d.update(_overrides(args.set))
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        cfg = RecoveryConfig.from_dict(d)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    validate_recovery_config(cfg)
    return cfg


def _teacher(args):
    from .teacher import load_teacher

    t = load_teacher(args.teacher)
    if t.profile is None:
        raise ConfigError(f"{args.teacher}: checkpoint carries no dataset profile")
    return t.to(args.device)


# ------------------------------------------------------------------ commands

def cmd_squeeze(args) -> int:
    from .data import load_split
    from .teacher import squeeze

    train = load_split(args.dataset, "train", download=args.download)
    val = load_split(args.dataset, "val", download=args.download)
    t = squeeze(train.normalized(), train.labels, args.arch, train.profile, args.epochs, seed=args.seed or 0,
                val_images=val.normalized(), val_labels=val.labels, lr=args.lr, flip=not args.no_flip,
                device=args.device)
    out = Path(args.out)
    if out.exists() and not args.force:
        raise FileExistsError(f"{out} exists; pass --force to overwrite")
    out.parent.mkdir(parents=True, exist_ok=True)
    t.save(out)
    print(json.dumps({"teacher": str(out), **t.info}))
    return EXIT_OK


def cmd_rank(args) -> int:
    from .data import load_split
    from .patches import save_pool
    from .pipeline import rank_pools

    teacher = _teacher(args)
    cfg = recovery_config_from_args(args)
    train = load_split(teacher.profile.name, "train", download=args.download)
    pools = rank_pools(train, teacher, cfg, args.crops_per_image)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for c, pool in pools.items():
        save_pool(pool, out / f"pool_{c:05d}.json")
    print(json.dumps({"pools": str(out), "classes": len(pools), "pool_size": pools[0].pool_size}))
    return EXIT_OK


def cmd_distill(args) -> int:
    from .data import load_split
    from .patches import load_pool
    from .pipeline import distill, rank_pools, set_deterministic

    cfg = recovery_config_from_args(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise FileExistsError(f"{out} exists; pass --force to overwrite")
    teacher = _teacher(args)
    set_deterministic(cfg.seed)
    pools = None
    if cfg.init_mode == "real_patch":
        train = load_split(teacher.profile.name, "train", download=args.download)
        if args.pools:
            pools = {}
            for c in range(teacher.profile.num_classes):
                pools[c] = load_pool(Path(args.pools) / f"pool_{c:05d}.json", train.images,
                                     teacher.profile.resolution)
        else:
            pools = rank_pools(train, teacher, cfg)
    res = distill(teacher, cfg, pools, out=out, workers=args.workers, force=args.force,
                  baseline=args.baseline, soft_labels=args.soft_labels,
                  extra_metadata={"teacher_path": str(args.teacher)})
    print(json.dumps({"run": str(out), "digest": res.digest, "image_iterations": res.image_iterations,
                      "wall_seconds": round(res.wall_seconds, 3)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import load_split
    from .relabel import append_result, post_train

    teacher = _teacher(args)
    ds = load_distilled(args.run)
    d = _read_config(args.config, "eval")
    d.update(_overrides(args.set))
    if args.seed is not None:
        d["seed"] = args.seed
    if args.epochs is not None:
        d["epochs"] = args.epochs
    try:
        ecfg = EvalConfig.for_run(ds.ipc, args.student, **d)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    val = load_split(ds.profile.name, "val", download=args.download)
    res = post_train(ds, args.student, teacher, ecfg, val.normalized(), val.labels)
    rec = {"run": str(args.run), "dataset": ds.profile.name, "ipc": ds.ipc, "student": args.student,
           "seed": ecfg.seed, "epochs": ecfg.epochs, "top1": 100.0 * res.final_top1}
    append_result(args.results or Path(args.run) / "results.jsonl", rec)
    print(json.dumps(rec))
    return EXIT_OK


def cmd_diversity(args) -> int:
    from .metrics import diversity_score, plot_diversity, write_diversity_series

    teacher = _teacher(args)
    reports = {}
    for run in args.runs:
        reports[Path(run).name] = diversity_score(load_distilled(run), teacher)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_diversity_series(out / "diversity.csv", reports)
        plot_diversity(out / "diversity.png", reports)
    print(json.dumps({name: {"mean": r.mean, "excluded": r.excluded} for name, r in reports.items()}))
    return EXIT_OK


def cmd_cost(args) -> int:
    from .metrics import RunLog, cost_report, format_cost_table, plot_cost, write_cost_series

    logs = []
    for run in args.runs:
        files = sorted((Path(run) / "logs").glob("*.jsonl"))
        if not files:
            raise ConfigError(f"{run}: no iteration logs under logs/")
        logs.append(RunLog.from_files(Path(run).name, files))
    baseline = args.baseline if args.baseline is not None else 0
    rows = cost_report(logs, baseline)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_cost_series(out / "cost.csv", rows)
        plot_cost(out / "cost.png", rows)
    print(format_cost_table(rows))
    return EXIT_OK


def cmd_reproduce(args) -> int:
    from .experiments import get_experiment, run_experiment

    try:
        exp = get_experiment(args.name)
    except KeyError as e:
        raise ConfigError(str(e.args[0])) from e
    out = Path(args.out or f"runs/{exp.name}")
    seeds = tuple(args.seeds) if args.seeds else None
    arms = tuple(args.arms) if args.arms else None
    rep = run_experiment(exp, out, workers=args.workers, device=args.device, seeds=seeds, arms=arms,
                         download=args.download)
    print(json.dumps(rep.checks, indent=1))
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="delt", description="Dataset distillation with staggered-start synthesis.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, teacher=True, config=True):
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--device", default="cpu")
        sp.add_argument("--force", action="store_true")
        sp.add_argument("--download", action="store_true", help="fetch benchmark data if missing")
        if config:
            sp.add_argument("--config", help="JSON config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if teacher:
            sp.add_argument("--teacher", required=True, help="teacher checkpoint")

    sp = sub.add_parser("squeeze", help="train a teacher")
    common(sp, teacher=False, config=False)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--arch", required=True)
    sp.add_argument("--epochs", type=int, required=True)
    sp.add_argument("--lr", type=float, default=0.1)
    sp.add_argument("--no-flip", action="store_true")
    sp.set_defaults(func=cmd_squeeze, need_out=True)

    sp = sub.add_parser("rank", help="build, score and save per-class patch pools")
    common(sp)
    sp.add_argument("--crops-per-image", type=int)
    sp.set_defaults(func=cmd_rank, need_out=True)

    sp = sub.add_parser("distill", help="synthesize a distilled dataset")
    common(sp)
    sp.add_argument("--pools", help="directory written by `rank`")
    sp.add_argument("--baseline", action="store_true", help="constant-iteration reference loop (M=1)")
    sp.add_argument("--soft-labels", action="store_true", help="also write per-class soft-label files")
    sp.set_defaults(func=cmd_distill, need_out=True)

    sp = sub.add_parser("eval", help="post-train a student and report top-1")
    common(sp)
    sp.add_argument("--run", required=True)
    sp.add_argument("--student", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--results", help="results table (default: <run>/results.jsonl)")
    sp.set_defaults(func=cmd_eval, need_out=False)

    sp = sub.add_parser("diversity", help="intra-class cosine similarity of one or more runs")
    common(sp, config=False)
    sp.add_argument("runs", nargs="+")
    sp.set_defaults(func=cmd_diversity, need_out=False)

    sp = sub.add_parser("cost", help="cost table from run iteration logs")
    common(sp, teacher=False, config=False)
    sp.add_argument("runs", nargs="+")
    sp.add_argument("--baseline", help="run directory name used as the baseline (default: first)")
    sp.set_defaults(func=cmd_cost, need_out=False)

    sp = sub.add_parser("reproduce", help="run a named end-to-end experiment")
    common(sp, teacher=False, config=False)
    sp.add_argument("name")
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.add_argument("--arms", nargs="+")
    sp.set_defaults(func=cmd_reproduce, need_out=False)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.need_out and not args.out:
        parser.print_usage(sys.stderr)
        print(f"delt {args.command}: error: --out is required", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except (ConfigError, FileExistsError, ValueError, KeyError) as e:
        print(f"delt {args.command}: invalid: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:
        log.debug("failure", exc_info=True)
        print(f"delt {args.command}: failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
