"""Shared experiment steps: data, cached teacher and synthetic sets, student fine-tuning, manifests."""

from __future__ import annotations

import copy
import csv
import json
import logging
import subprocess
from dataclasses import asdict, dataclass, replace
from importlib import metadata
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn

from .config import ExperimentConfig
from .finetune import TrainState, evaluate, finetune, make_student
from .quantizer import FakeQuantModel
from .refmodels import build_teacher, freeze
from .storage import load_checkpoint, load_synthetic, save_checkpoint, save_synthetic
from .synthesis import SynthesisConfig, SyntheticDataset, synthesize_dataset
from .toydata import ToyDataset, dataset_manifest, generate_toy_dataset, train_teacher

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "lr", "train_loss", "fa_term", "kl_term", "test_top1")


def version_string() -> str:
    """Package version plus a ``git describe`` suffix when run from a checkout."""
    try:
        base = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        base = "0+unknown"
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return base
    desc = out.stdout.strip()
    return f"{base}+{desc}" if out.returncode == 0 and desc else base


def write_manifest(directory: Path, cfg: ExperimentConfig, command: str, seeds: dict, extra: Optional[dict] = None) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "version": version_string(), "seeds": seeds,
                "torch": torch.__version__, "config": cfg.to_dict(), **(extra or {})}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_data(cfg: ExperimentConfig) -> tuple[ToyDataset, ToyDataset]:
    d = cfg.data
    return generate_toy_dataset(d.seed, d.classes, d.per_class_train, d.per_class_test, d.noise)


def cache_dir(out: Path) -> Path:
    path = out / "cache"
    path.mkdir(parents=True, exist_ok=True)
    return path


def ensure_teacher(cfg: ExperimentConfig, out: Path, data: Optional[tuple[ToyDataset, ToyDataset]] = None) -> nn.Module:
    """Train the teacher for ``cfg`` or reuse a cached checkpoint keyed by the data and teacher sections."""
    path = cache_dir(out) / f"teacher-{cfg.digest('data', 'teacher')}.ckpt"
    if path.exists():
        return freeze(load_checkpoint(path))
    train, test = data or load_data(cfg)
    t = cfg.teacher
    model = build_teacher(t.arch, cfg.data.classes, t.width)
    model, report = train_teacher(model, train, test, t.epochs, t.lr, t.batch, t.seed, t.crop_pad)
    log.info("teacher test top-1 %.4f", report.test_top1)
    save_checkpoint(model, path, meta={"report": asdict(report), "dataset": dataset_manifest(train, test)})
    return freeze(model)


def synthesis_config(cfg: ExperimentConfig, **changes) -> SynthesisConfig:
    s = replace(cfg.synthesis, classes=cfg.data.classes)
    return replace(s, **changes) if changes else s


def ensure_synthetic(cfg: ExperimentConfig, teacher: nn.Module, out: Path, syn: Optional[SynthesisConfig] = None,
                     bounds: Optional[tuple[torch.Tensor, torch.Tensor]] = None) -> SyntheticDataset:
    """Synthesize (or load the cached copy of) a dataset for ``syn``, defaulting to the config's settings."""
    syn = syn or synthesis_config(cfg)
    key = ExperimentConfig(data=cfg.data, teacher=cfg.teacher, synthesis=syn).digest("data", "teacher", "synthesis")
    directory = cache_dir(out) / f"synthetic-{key}"
    if (directory / "manifest.json").exists():
        return load_synthetic(directory)
    if bounds is None:
        bounds = load_data(cfg)[0].bounds()
    ds = synthesize_dataset(teacher, syn, bounds)
    save_synthetic(ds, directory)
    return ds


def build_student(cfg: ExperimentConfig, teacher: nn.Module, calibration: torch.Tensor) -> FakeQuantModel:
    q = cfg.quant
    return make_student(teacher, calibration, q.weight_bits, q.act_bits, cfg.synthesis.batch, q.act_decay)


def write_metrics(path: Path, metrics: list[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for row in metrics:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in METRIC_COLUMNS[1:]])


def write_rows(path: Path, rows: list[dict], columns: Optional[list[str]] = None):
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        w.writerows(rows)


@dataclass
class FinetuneOutcome:
    state: TrainState
    pre_top1: float


def run_finetune(cfg: ExperimentConfig, teacher: nn.Module, syn: SyntheticDataset, test: ToyDataset,
                 directory: Optional[Path] = None) -> FinetuneOutcome:
    """Calibrate a student on the synthetic images, fine-tune it, and optionally persist metrics."""
    student = build_student(cfg, teacher, syn.images)
    pre = evaluate(student, test.images, test.labels)
    state = finetune(syn.images, syn.labels, teacher, student, copy.deepcopy(cfg.finetune),
                     test=(test.images, test.labels))
    if directory is not None:
        directory.mkdir(parents=True, exist_ok=True)
        write_metrics(directory / "metrics.csv", state.metrics)
        if state.diagnostics:
            write_rows(directory / "diagnostics.csv", state.diagnostics)
        save_checkpoint(student, directory / "student.ckpt",
                        meta={"final_top1": state.final_top1, "best_top1": state.best_top1,
                              "best_epoch": state.best_epoch, "pre_top1": pre})
    return FinetuneOutcome(state, pre)

