"""Difficulty diagnostics comparing FNL and HFNL synthetic sets with real data."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import stats

from .config import ExperimentConfig
from .difficulty import difficulty, error_rate_by_difficulty, histogram
from .pipeline import ensure_synthetic, ensure_teacher, load_data, synthesis_config, write_rows
from .synthesis import SynthesisHistory, SyntheticDataset

log = logging.getLogger(__name__)

CURVE_FIELDS = ("objective", "bns", "label_term", "il", "mean_difficulty", "lr")


@dataclass
class ShiftStats:
    """Difficulty shift of HFNL over FNL samples under the teacher."""

    mean_fnl: float
    mean_hfnl: float
    tail_fnl: float
    tail_hfnl: float
    p_value: float

    @property
    def shifted(self) -> bool:
        return self.mean_hfnl > self.mean_fnl and self.tail_hfnl > self.tail_fnl


def shift_stats(d_fnl: np.ndarray, d_hfnl: np.ndarray, bins: int = 10, threshold: float = 0.5) -> ShiftStats:
    """Means, tail masses and a one-sided Mann-Whitney p-value for ``d_hfnl > d_fnl``."""
    p = stats.mannwhitneyu(d_hfnl, d_fnl, alternative="greater").pvalue
    return ShiftStats(float(np.mean(d_fnl)), float(np.mean(d_hfnl)), histogram(d_fnl, bins).tail_mass(threshold),
                      histogram(d_hfnl, bins).tail_mass(threshold), float(p))


def mean_curves(histories: list[SynthesisHistory]) -> dict[str, np.ndarray]:
    """Per-iteration averages over batches."""
    return {f: np.mean([getattr(h, f) for h in histories], axis=0) for f in CURVE_FIELDS}


@torch.no_grad()
def per_sample_ce(model: nn.Module, x: torch.Tensor, y: torch.Tensor, batch: int = 500) -> torch.Tensor:
    model.eval()
    return torch.cat([F.cross_entropy(model(x[i:i + batch]), y[i:i + batch], reduction="none")
                      for i in range(0, len(y), batch)])


def analysis_sets(cfg: ExperimentConfig, teacher: nn.Module, out: Path, bounds) -> dict[str, SyntheticDataset]:
    base = synthesis_config(cfg)
    return {mode: ensure_synthetic(cfg, teacher, out, replace(base, mode=mode), bounds) for mode in ("FNL", "HFNL")}


def run_analysis(cfg: ExperimentConfig, out: Path) -> ShiftStats:
    """Write histograms, error-by-difficulty, loss curves and loss-vs-difficulty tables under ``out/analysis``."""
    bins, threshold = cfg.analysis.bins, cfg.analysis.tail_threshold
    data = load_data(cfg)
    train, test = data
    teacher = ensure_teacher(cfg, out, data)
    sets = analysis_sets(cfg, teacher, out, train.bounds())
    directory = out / "analysis"
    directory.mkdir(parents=True, exist_ok=True)

    d = {mode: difficulty(ds.images, ds.labels, teacher).double().numpy() for mode, ds in sets.items()}
    d["real"] = difficulty(test.images, test.labels, teacher).double().numpy()
    for name, values in d.items():
        histogram(values, bins).to_csv(directory / f"hist_{name}.csv")
    error_rate_by_difficulty(test.images, test.labels, teacher, bins).to_csv(directory / "error_by_difficulty.csv")

    curves = {mode: mean_curves(ds.histories) for mode, ds in sets.items() if ds.histories}
    rows = []
    for mode, c in curves.items():
        for t in range(len(c["objective"])):
            rows.append({"mode": mode, "iteration": t, **{f: repr(float(c[f][t])) for f in CURVE_FIELDS}})
    if rows:
        write_rows(directory / "loss_curves.csv", rows, ["mode", "iteration", *CURVE_FIELDS])

    rows = []
    for mode, ds in sets.items():
        ce = per_sample_ce(teacher, ds.images, ds.labels).double().numpy()
        rows += [{"set": mode, "label": int(y), "difficulty": repr(float(di)), "ce": repr(float(c))}
                 for y, di, c in zip(ds.labels, d[mode], ce)]
    write_rows(directory / "loss_vs_difficulty.csv", rows, ["set", "label", "difficulty", "ce"])

    shift = shift_stats(d["FNL"], d["HFNL"], bins, threshold)
    summary = {**shift.__dict__, "shifted": shift.shifted, "mean_real": float(d["real"].mean()),
               "tail_real": histogram(d["real"], bins).tail_mass(threshold), "threshold": threshold,
               "samples": {k: int(len(v)) for k, v in d.items()}}
    (directory / "summary.json").write_text(json.dumps(summary, indent=2))
    log.info("mean difficulty FNL %.4f HFNL %.4f (p=%.2e); tail mass %.4f vs %.4f", shift.mean_fnl, shift.mean_hfnl,
             shift.p_value, shift.tail_fnl, shift.tail_hfnl)
    return shift

