"""Command-line entry point: ``umcl {train,eval,ablate,gradcheck,synth}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import ablation, evaluation
from .config import ConfigError, RunConfig, load_config, parse_pairs
from .data import DatasetError, SynthConfig, generate_synthetic, load_eval_set
from .objective import gradcheck
from .runs import RunDirectory, RunDirectoryError, default_root, run_experiment
from .training import CheckpointError, TrainingDiverged, load_checkpoint

log = logging.getLogger("umcl")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _out_dir(arg, name) -> Path:
    return Path(arg) if arg else default_root() / name


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = replace(config, train=replace(config.train, seed=args.seed))
    out = _out_dir(args.out, f"train-seed{config.train.seed}")
    try:
        res = run_experiment(config, out_dir=out, tasks=tuple(args.tasks.split(",")))
    except TrainingDiverged as e:
        e.checkpoint.save(out / "last_good.ckpt")
        print(f"training aborted: {e}; last good parameters in {out / 'last_good.ckpt'}",
              file=sys.stderr)
        return EXIT_FAIL
    print(f"run directory: {out}")
    if res["metrics"]:
        print(evaluation.format_metrics(res["metrics"]))
    return EXIT_OK


def cmd_eval(args) -> int:
    tasks = tuple(t for t in args.tasks.split(",") if t)
    unknown = set(tasks) - set(evaluation.TASKS)
    if unknown:
        raise ConfigError(f"unknown tasks: {', '.join(sorted(unknown))}")
    ckpt = load_checkpoint(args.checkpoint)
    data = load_eval_set(args.data, ckpt.config.num_classes, ckpt.config.image_dim)
    metrics = evaluation.evaluate(ckpt, data, tasks, ensemble=args.ensemble)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("eval.json")
    evaluation.write_metrics_json(metrics, out)
    if args.export:
        evaluation.export_embeddings(data.images, data.classes, ckpt, args.export)
    print(evaluation.format_metrics(metrics))
    print(f"metrics written to {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    grid = ablation.load_grid(args.grid or ablation.default_grid_path())
    if args.seeds:
        grid = replace(grid, seeds=tuple(int(s) for s in args.seeds.split(",")))
    out = _out_dir(args.out, "ablation")
    RunDirectory(out).open()
    result = ablation.run_grid(grid, out, jobs=args.jobs)
    print(result.format())
    print(f"results written to {out / 'results.csv'}")
    return EXIT_FAIL if any(r["errors"] for r in result.table) else EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck(args.seed)
    print(report.table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.txt").write_text(report.table() + "\n")
        (out / "gradcheck.json").write_text(report.to_json() + "\n")
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_synth(args) -> int:
    types = {f.name: type(f.default) for f in fields(SynthConfig)}
    values = parse_pairs(Path(args.config).read_text(), args.config) if args.config else {}
    # reuse the run-config converter so synth files get the same strictness
    unknown = set(values) - set(types)
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
    cfg = RunConfig().with_values({f"synth.{k}": v for k, v in values.items()}).synth \
        or SynthConfig()
    out = _out_dir(args.out, f"synth-seed{args.seed}")
    out.mkdir(parents=True, exist_ok=True)
    paths = generate_synthetic(cfg, args.seed).write(out)
    (out / "synth_config.txt").write_text(
        "\n".join(f"{k}={getattr(cfg, k)}" for k in types) + f"\nseed={args.seed}\n")
    for k, p in paths.items():
        print(f"{k:<12} {p}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="umcl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and evaluate it on held-out data")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--tasks", default="zero_shot,probe")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a labeled JSONL set")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--tasks", default="zero_shot")
    e.add_argument("--ensemble", action="store_true", help="also report prompt-ensemble accuracy")
    e.add_argument("--out", help="metrics JSON path (default: eval.json next to checkpoint)")
    e.add_argument("--export", help="write image embeddings + PCA coordinates to this CSV")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation grid (default: the shipped context/label-data grid)")
    a.add_argument("--grid")
    a.add_argument("--out")
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--seeds", help="comma-separated seeds overriding the grid file")
    a.set_defaults(func=cmd_ablate)

    g = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a synthetic corpus as JSONL files")
    s.add_argument("--config")
    s.add_argument("--out")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, CheckpointError, RunDirectoryError,
            FileNotFoundError, ValueError) as e:
        print(f"umcl {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
