"""Run directories and the train-then-evaluate unit shared by the CLI and ablations."""

from __future__ import annotations

import json
import os
from dataclasses import replace
from pathlib import Path

from .config import RunConfig
from .data import EvalSet, Source, generate_synthetic, load_dataset, load_eval_set
from .evaluation import ProbeConfig, evaluate, write_metrics_json
from .prompt import TemplateRegistry, builtin_registry
from .training import train

COMPLETE_MARKER = "COMPLETE"
CONFIG_SNAPSHOT = "config.txt"


class RunDirectoryError(RuntimeError):
    pass


def default_root() -> Path:
    return Path(os.environ.get("UMCL_RUN_ROOT", "runs"))


class RunDirectory:
    """Output folder for one run; frozen once the completion marker exists."""

    def __init__(self, path):
        self.path = Path(path)

    def open(self) -> "RunDirectory":
        if self.completed:
            raise RunDirectoryError(f"{self.path} holds a completed run; choose a new directory")
        try:
            self.path.mkdir(parents=True, exist_ok=True)
            probe = self.path / ".write-test"
            probe.write_text("")
            probe.unlink()
        except OSError as e:
            raise RunDirectoryError(f"cannot write to {self.path}: {e}") from None
        return self

    @property
    def completed(self) -> bool:
        return (self.path / COMPLETE_MARKER).exists()

    def snapshot(self, config: RunConfig) -> Path:
        p = self.path / CONFIG_SNAPSHOT
        config.dump(p)
        return p

    def complete(self) -> None:
        (self.path / COMPLETE_MARKER).write_text("")

    def __truediv__(self, name):
        return self.path / name


def prepare_data(config: RunConfig, seed: int):
    """Datasets, held-out set and template registry for one run.

    A synthetic corpus is drawn with ``seed`` when ``synth.*`` keys are set;
    otherwise ``data.*`` paths are read.
    """
    t = config.train
    if config.synth is not None:
        if config.synth.num_classes != t.num_classes or config.synth.image_dim != t.image_dim:
            raise ValueError("synth.num_classes/image_dim must match num_classes/image_dim")
        corpus = generate_synthetic(config.synth, seed)
        registry = builtin_registry(t.num_classes) if t.num_classes <= 14 else \
            TemplateRegistry(corpus.class_names,
                             tuple((f"{n} is present",) for n in corpus.class_names))
        return corpus.image_text, corpus.image_label, corpus.held_out, registry
    d = config.data
    if "image_text" not in d and "image_label" not in d:
        raise ValueError("config names neither synth.* settings nor data.* files")
    it = load_dataset(d["image_text"], Source.IMAGE_TEXT, image_dim=t.image_dim) \
        if "image_text" in d else None
    il = load_dataset(d["image_label"], Source.IMAGE_LABEL, t.num_classes, t.image_dim) \
        if "image_label" in d else None
    ev = load_eval_set(d["eval"], t.num_classes, t.image_dim) if "eval" in d else None
    registry = load_registry(config)
    return it, il, ev, registry


def load_registry(config: RunConfig) -> TemplateRegistry:
    d = config.data
    if "templates" in d:
        if "class_names" in d:
            names = [n for n in Path(d["class_names"]).read_text().splitlines() if n.strip()]
        else:
            names = builtin_registry().class_names
        return TemplateRegistry.from_file(d["templates"], names).subset(config.train.num_classes)
    return builtin_registry(config.train.num_classes)


def run_experiment(config: RunConfig, seed: int | None = None, out_dir=None,
                   tasks=("zero_shot", "probe"), probe: ProbeConfig = ProbeConfig()) -> dict:
    """Train one model and evaluate it on the held-out set.

    With ``out_dir``, writes the config snapshot first, then checkpoint,
    metrics.csv and eval.json, then the completion marker.
    """
    seed = config.train.seed if seed is None else seed
    config = replace(config, train=replace(config.train, seed=seed))
    run = None
    if out_dir is not None:
        run = RunDirectory(out_dir).open()
        run.snapshot(config)
    it, il, ev, registry = prepare_data(config, seed)
    result = train(
        config.train, it, il, registry,
        metrics_path=None if run is None else run / "metrics.csv",
        checkpoint_path=None if run is None else run / "checkpoint.ckpt",
    )
    metrics = {} if ev is None else evaluate(result.checkpoint, ev, tasks, probe=probe)
    if run is not None:
        write_metrics_json(metrics, run / "eval.json")
        run.complete()
    return {"metrics": metrics, "result": result, "eval_set": ev}


def read_json(path):
    with open(path) as fh:
        return json.load(fh)
