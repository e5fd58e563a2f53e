"""Ablation grids (context length, label data) and the false-negative study."""

from __future__ import annotations

import configparser
import csv
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .runs import run_experiment

METRICS = ("zero_shot_acc", "zero_shot_acc_ens", "probe_acc")


@dataclass(frozen=True)
class AblationGrid:
    base: RunConfig
    cells: tuple[tuple[str, dict], ...]
    seeds: tuple[int, ...] = (0,)

    def cell_config(self, name: str) -> RunConfig:
        delta = dict(self.cells)[name]
        return self.base.with_values(delta)


def load_grid(path) -> AblationGrid:
    """Read an INI grid: ``[base]`` keys, ``[grid] seeds``, one ``[cell NAME]`` per cell."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    cp.optionxform = str
    cp.read_string(Path(path).read_text(), source=str(path))
    if "base" not in cp:
        raise ConfigError(f"{path}: missing [base] section")
    base = RunConfig().with_values(dict(cp["base"]))
    seeds = (0,)
    if "grid" in cp:
        extra = set(cp["grid"]) - {"seeds"}
        if extra:
            raise ConfigError(f"{path}: unknown [grid] keys {sorted(extra)}")
        if "seeds" in cp["grid"]:
            seeds = tuple(int(s) for s in cp["grid"]["seeds"].split(","))
    cells = []
    for section in cp.sections():
        if section in ("base", "grid"):
            continue
        m = re.fullmatch(r"cell\s+(.+)", section)
        if not m:
            raise ConfigError(f"{path}: unexpected section [{section}]")
        delta = dict(cp[section])
        base.with_values(delta)  # validate keys now, not mid-run
        cells.append((m.group(1).strip(), delta))
    if not cells:
        raise ConfigError(f"{path}: grid has no cells")
    return AblationGrid(base, tuple(cells), seeds)


def default_grid_path() -> Path:
    return Path(str(resources.files("umcl") / "data" / "ablation_grid.ini"))


def cell_dirname(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name.replace("/", "-"))


def _run_cell(args):
    name, config, seed, out_dir = args
    try:
        out = run_experiment(config, seed, out_dir)
        return {"cell": name, "seed": seed, **out["metrics"], "error": ""}
    except Exception as e:  # recorded per cell; the grid keeps going
        return {"cell": name, "seed": seed, **{m: math.nan for m in METRICS},
                "error": f"{type(e).__name__}: {e}"}


@dataclass
class GridResult:
    runs: list[dict]
    table: list[dict] = field(default_factory=list)

    def to_csv(self, path) -> None:
        cols = ["cell", *METRICS, "n_ok", "errors"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, cols, lineterminator="\n")
            w.writeheader()
            for row in self.table:
                w.writerow({k: row[k] for k in cols})

    def runs_to_csv(self, path) -> None:
        cols = ["cell", "seed", *METRICS, "error"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, cols, lineterminator="\n", extrasaction="ignore")
            w.writeheader()
            w.writerows(self.runs)

    def format(self) -> str:
        head = f"{'setting':<16} | {'zero-shot':>9} | {'ENS':>6} | {'probe':>6}"
        lines = [head, "-" * len(head)]
        for row in self.table:
            vals = " | ".join(f"{row[m]:>{w}.3f}" for m, w in zip(METRICS, (9, 6, 6)))
            note = f"  ({row['errors']})" if row["errors"] else ""
            lines.append(f"{row['cell']:<16} | {vals}{note}")
        return "\n".join(lines)

    def value(self, cell: str, metric: str = "zero_shot_acc") -> float:
        return next(r[metric] for r in self.table if r["cell"] == cell)


def _median(vals):
    vals = [v for v in vals if not math.isnan(v)]
    return float(np.median(vals)) if vals else math.nan


def summarize(runs: list[dict]) -> list[dict]:
    table = []
    for name in sorted({r["cell"] for r in runs}):
        rows = [r for r in runs if r["cell"] == name]
        ok = [r for r in rows if not r["error"]]
        entry = {"cell": name, "n_ok": len(ok),
                 "errors": "; ".join(sorted({r["error"] for r in rows if r["error"]}))}
        entry.update({m: _median([r[m] for r in ok]) for m in METRICS})
        table.append(entry)
    return table


def run_grid(grid: AblationGrid, out_dir=None, jobs: int = 1) -> GridResult:
    """Train and evaluate every (cell, seed); table rows are seed medians sorted by cell.

    Each cell writes under its own ``out_dir/<cell>/seed-<n>`` folder.
    """
    tasks = []
    for name, _ in grid.cells:
        cfg = grid.cell_config(name)
        for seed in grid.seeds:
            cell_out = None if out_dir is None else \
                Path(out_dir) / cell_dirname(name) / f"seed-{seed}"
            tasks.append((name, cfg, seed, cell_out))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            runs = list(pool.map(_run_cell, tasks))
    else:
        runs = [_run_cell(t) for t in tasks]
    result = GridResult(runs, summarize(runs))
    if out_dir is not None:
        result.to_csv(Path(out_dir) / "results.csv")
        result.runs_to_csv(Path(out_dir) / "runs.csv")
        (Path(out_dir) / "results.txt").write_text(result.format() + "\n")
    return result


@dataclass
class FalseNegativeRow:
    p_overlap: float
    umcl_acc: float
    baseline_acc: float
    umcl_runs: list[float]
    baseline_runs: list[float]


def false_negative_study(overlap_levels, base: RunConfig, seeds=(0, 1, 2),
                         jobs: int = 1) -> list[FalseNegativeRow]:
    """Soft-target loss against the hard-target baseline as label overlap grows.

    Both losses see identical corpora and batch streams for each seed;
    reported accuracies are seed medians of held-out zero-shot accuracy.
    """
    if base.synth is None:
        raise ValueError("the false-negative study needs a synthetic corpus (synth.* keys)")
    tasks = []
    for p in overlap_levels:
        for loss in ("umcl", "hard_infonce"):
            cfg = replace(base, synth=replace(base.synth, p_overlap=float(p)),
                          train=replace(base.train, loss=loss))
            for seed in seeds:
                tasks.append((f"{p}/{loss}", cfg, seed, None))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            runs = list(pool.map(_run_cell, tasks))
    else:
        runs = [_run_cell(t) for t in tasks]
    rows = []
    for p in overlap_levels:
        acc = {loss: [r["zero_shot_acc"] for r in runs if r["cell"] == f"{p}/{loss}"]
               for loss in ("umcl", "hard_infonce")}
        rows.append(FalseNegativeRow(float(p), _median(acc["umcl"]), _median(acc["hard_infonce"]),
                                     acc["umcl"], acc["hard_infonce"]))
    return rows


def format_false_negative(rows) -> str:
    head = f"{'p_overlap':>9} | {'UMCL':>6} | {'hard':>6} | runs (UMCL / hard)"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r.p_overlap:>9.2f} | {r.umcl_acc:>6.3f} | {r.baseline_acc:>6.3f} | "
            f"{', '.join(f'{a:.3f}' for a in r.umcl_runs)} / "
            f"{', '.join(f'{a:.3f}' for a in r.baseline_runs)}"
        )
    return "\n".join(lines)
