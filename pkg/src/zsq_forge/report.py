"""Render result CSVs to PNG and SVG figures.

Figures are built only from CSV files found under a run directory, so
deleting the plots and rendering again reproduces the same data series.
"""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

log = logging.getLogger(__name__)

FORMATS = ("png", "svg")
HIST_SETS = ("real", "FNL", "HFNL")


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _save(fig, stem: Path) -> list[Path]:
    paths = []
    for ext in FORMATS:
        path = stem.with_suffix(f".{ext}")
        meta = {"Date": None} if ext == "svg" else {"Software": None}
        fig.savefig(path, format=ext, metadata=meta)
        paths.append(path)
    plt.close(fig)
    return paths


def histogram_series(analysis: Path) -> dict[str, tuple[list[float], list[float]]]:
    """Bin centres and fractions per available histogram CSV."""
    series = {}
    for name in HIST_SETS:
        path = analysis / f"hist_{name}.csv"
        if path.exists():
            rows = read_csv(path)
            series[name] = ([(float(r["bin_lo"]) + float(r["bin_hi"])) / 2 for r in rows],
                            [float(r["fraction"]) for r in rows])
    return series


def plot_histograms(analysis: Path, dest: Path) -> list[Path]:
    series = histogram_series(analysis)
    if not series:
        return []
    fig, ax = plt.subplots(figsize=(5, 3.5))
    width = 0.9 / (10 * len(series))
    for k, (name, (centres, fractions)) in enumerate(series.items()):
        offset = (k - (len(series) - 1) / 2) * width
        ax.bar([c + offset for c in centres], fractions, width=width, label=name, log=True)
    ax.set_xlabel("difficulty")
    ax.set_ylabel("fraction of samples")
    ax.set_xlim(0, 1)
    ax.legend()
    fig.tight_layout()
    return _save(fig, dest / "difficulty_histogram")


def plot_error_by_difficulty(analysis: Path, dest: Path) -> list[Path]:
    path = analysis / "error_by_difficulty.csv"
    if not path.exists():
        return []
    rows = [r for r in read_csv(path) if r["error_rate"]]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([(float(r["bin_lo"]) + float(r["bin_hi"])) / 2 for r in rows], [float(r["error_rate"]) for r in rows],
            marker="o")
    ax.set_xlabel("difficulty")
    ax.set_ylabel("top-1 error")
    fig.tight_layout()
    return _save(fig, dest / "error_by_difficulty")


def plot_loss_curves(analysis: Path, dest: Path) -> list[Path]:
    path = analysis / "loss_curves.csv"
    if not path.exists():
        return []
    by_mode = defaultdict(list)
    for r in read_csv(path):
        by_mode[r["mode"]].append(r)
    fig, (ax_loss, ax_d) = plt.subplots(1, 2, figsize=(9, 3.5))
    for mode, rows in by_mode.items():
        it = [int(r["iteration"]) for r in rows]
        ax_loss.plot(it, [float(r["il"]) for r in rows], label=f"{mode} CE")
        ax_d.plot(it, [float(r["mean_difficulty"]) for r in rows], label=mode)
    ax_loss.set_yscale("log")
    ax_loss.set_xlabel("iteration")
    ax_loss.set_ylabel("cross-entropy")
    ax_d.set_xlabel("iteration")
    ax_d.set_ylabel("mean difficulty")
    ax_loss.legend()
    ax_d.legend()
    fig.tight_layout()
    return _save(fig, dest / "synthesis_curves")


def plot_ablation(run: Path, dest: Path) -> list[Path]:
    path = run / "ablation.csv"
    if not path.exists():
        return []
    rows = [r for r in read_csv(path) if r["status"] == "ok"]
    labels = [f"H{r['hss']}S{r['sdp']}F{r['fa']}" for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(labels, [float(r["top1"]) for r in rows], yerr=[float(r["top1_std"]) for r in rows], capsize=3)
    ax.set_ylabel("top-1")
    ax.set_ylim(min((float(r["top1"]) for r in rows), default=0) - 0.05, 1.0)
    ax.tick_params(axis="x", rotation=45)
    fig.tight_layout()
    return _save(fig, dest / "ablation")


def plot_metrics(run: Path, dest: Path) -> list[Path]:
    paths = sorted(p for p in run.rglob("metrics.csv") if "plots" not in p.parts)
    if not paths:
        return []
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for p in paths:
        rows = read_csv(p)
        ax.plot([int(r["epoch"]) for r in rows], [float(r["test_top1"]) for r in rows],
                label=str(p.parent.relative_to(run)) or ".", linewidth=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("test top-1")
    if len(paths) <= 8:
        ax.legend(fontsize=6)
    fig.tight_layout()
    return _save(fig, dest / "finetune_curves")


def render_report(run: Path) -> list[Path]:
    """Render every figure whose source CSVs exist under ``run`` into ``run/plots``."""
    plt.rcParams["svg.hashsalt"] = "zsq-forge"
    dest = run / "plots"
    dest.mkdir(parents=True, exist_ok=True)
    analysis = run / "analysis"
    out = []
    for fn in (plot_histograms, plot_error_by_difficulty, plot_loss_curves):
        out += fn(analysis, dest)
    out += plot_ablation(run / "ablation", dest)
    out += plot_metrics(run, dest)
    log.info("wrote %d figures to %s", len(out), dest)
    return out
