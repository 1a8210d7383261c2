"""Sample difficulty ``d = 1 - p_y`` and the histogram diagnostics built on it."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn


@dataclass
class DifficultyReport:
    bin_edges: np.ndarray
    fractions: np.ndarray
    error_rates: Optional[np.ndarray] = None
    counts: Optional[np.ndarray] = None

    def tail_mass(self, threshold: float = 0.5) -> float:
        """Fraction of samples in bins whose lower edge is at or above ``threshold``."""
        return float(self.fractions[self.bin_edges[:-1] >= threshold - 1e-12].sum())

    def to_csv(self, path: str | Path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "fraction", "error_rate"])
            for i, frac in enumerate(self.fractions):
                err = "" if self.error_rates is None or np.isnan(self.error_rates[i]) else repr(float(self.error_rates[i]))
                w.writerow([repr(float(self.bin_edges[i])), repr(float(self.bin_edges[i + 1])), repr(float(frac)), err])

    @classmethod
    def from_csv(cls, path: str | Path) -> "DifficultyReport":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        edges = [float(rows[0]["bin_lo"])] + [float(r["bin_hi"]) for r in rows]
        fractions = [float(r["fraction"]) for r in rows]
        errs = [float(r["error_rate"]) if r["error_rate"] else np.nan for r in rows]
        has_err = any(r["error_rate"] for r in rows)
        return cls(np.array(edges), np.array(fractions), np.array(errs) if has_err else None)


def difficulty_from_logits(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    num_classes = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes - 1}]")
    p_y = torch.softmax(logits, dim=1).gather(1, labels.view(-1, 1)).squeeze(1)
    return 1.0 - p_y


@torch.no_grad()
def difficulty(x: torch.Tensor, y: torch.Tensor, model: nn.Module, batch: int = 500) -> torch.Tensor:
    """Per-sample difficulty under ``model`` evaluated with stored BN statistics."""
    was_training = model.training
    model.eval()
    try:
        out = [difficulty_from_logits(model(x[i:i + batch]), y[i:i + batch]) for i in range(0, len(y), batch)]
    finally:
        model.train(was_training)
    return torch.cat(out) if out else torch.empty(0)


def histogram(values: np.ndarray, bins: int = 10) -> DifficultyReport:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot build a histogram of an empty sample set")
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts = np.bincount(bin_index(values, edges), minlength=bins)
    return DifficultyReport(edges, counts / values.size, counts=counts)


def bin_index(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Bin membership with half-open bins ``[lo, hi)`` and a closed last bin."""
    bins = len(edges) - 1
    return np.clip(np.digitize(np.clip(values, 0.0, 1.0), edges[1:-1], right=False), 0, bins - 1)


def difficulty_histogram(samples: torch.Tensor, labels: torch.Tensor, model: nn.Module, bins: int = 10) -> DifficultyReport:
    if len(labels) == 0:
        raise ValueError("cannot build a histogram of an empty sample set")
    return histogram(difficulty(samples, labels, model).double().numpy(), bins)


@torch.no_grad()
def error_rate_by_difficulty(dataset: torch.Tensor, labels: torch.Tensor, model: nn.Module, bins: int = 10,
                             batch: int = 500) -> DifficultyReport:
    """Per-bin top-1 error, binning by the difficulty the same model assigns.

    Bins with no members carry ``nan`` as their error rate.
    """
    if len(labels) == 0:
        raise ValueError("cannot evaluate an empty sample set")
    was_training = model.training
    model.eval()
    d_parts, wrong_parts = [], []
    try:
        for i in range(0, len(labels), batch):
            logits = model(dataset[i:i + batch])
            y = labels[i:i + batch]
            d_parts.append(difficulty_from_logits(logits, y))
            wrong_parts.append(logits.argmax(1) != y)
    finally:
        model.train(was_training)
    d = torch.cat(d_parts).double().numpy()
    wrong = torch.cat(wrong_parts).numpy()
    report = histogram(d, bins)
    idx = bin_index(d, report.bin_edges)
    errors = np.full(bins, np.nan)
    for b in range(bins):
        members = idx == b
        if members.any():
            errors[b] = wrong[members].mean()
    report.error_rates = errors
    return report
