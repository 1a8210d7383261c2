"""Noise-optimization synthesis of calibration/fine-tuning images from a frozen teacher.

Inputs start as standard Gaussian noise and are optimized with Adam to match
the teacher's stored BN statistics plus a label term: plain cross-entropy
(FNL) or cross-entropy weighted by ``difficulty ** gamma`` (HFNL).
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .difficulty import difficulty, difficulty_from_logits
from .refmodels import LayerStats, forward_traced
from .toydata import DivergenceError, IMAGE_SHAPE

log = logging.getLogger(__name__)

MODES = ("FNL", "HFNL")


@dataclass
class SynthesisConfig:
    N: int = 5120
    batch: int = 256
    iters: int = 1000
    lr0: float = 0.5
    plateau_window: int = 50
    lr_decay: float = 0.1
    beta: float = 1.0
    gamma: float = 2.0
    mode: str = "HFNL"
    classes: int = 10
    seed: int = 0
    clip_inputs: bool = True
    detach_weight: bool = False

    def __post_init__(self):
        if self.gamma < 0 or self.beta < 0:
            raise ValueError("beta and gamma must be non-negative")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.N < 1 or self.batch < 2:
            raise ValueError("need N >= 1 and batch >= 2")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass
class SyntheticSample:
    x: torch.Tensor
    y: int
    d_teacher: float
    loss_trace: np.ndarray


@dataclass
class SynthesisHistory:
    """Per-iteration batch-level curves of one synthesis run."""

    objective: list[float] = field(default_factory=list)
    bns: list[float] = field(default_factory=list)
    label_term: list[float] = field(default_factory=list)
    il: list[float] = field(default_factory=list)
    mean_difficulty: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)


def bns_loss(stats: Sequence[LayerStats]) -> torch.Tensor:
    if not stats:
        raise ValueError("need statistics from at least one BN layer")
    total = 0.0
    for s in stats:
        if s.mu_stored.shape != s.mu_batch.shape or s.sigma_stored.shape != s.sigma_batch.shape:
            raise ValueError(f"statistic length mismatch at BN layer {s.layer_index}")
        total = total + torch.linalg.vector_norm(s.mu_stored - s.mu_batch) \
            + torch.linalg.vector_norm(s.sigma_stored - s.sigma_batch)
    return total / len(stats)


def il_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels)


def hil_loss(logits: torch.Tensor, labels: torch.Tensor, gamma: float, detach_weight: bool = False) -> torch.Tensor:
    """Cross-entropy weighted per sample by ``difficulty ** gamma``."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    ce = F.cross_entropy(logits, labels, reduction="none")
    weight = torch.pow(difficulty_from_logits(logits, labels), gamma)
    if detach_weight:
        weight = weight.detach()
    return (weight * ce).mean()


def objective_terms(x: torch.Tensor, labels: torch.Tensor, teacher: nn.Module, beta: float, gamma: float,
                    mode: str, detach_weight: bool = False) -> dict[str, torch.Tensor]:
    logits, _, stats = forward_traced(teacher, x, capture_bn=True, capture_features=False)
    bns = bns_loss(stats)
    if mode == "FNL":
        label_term = il_loss(logits, labels)
    elif mode == "HFNL":
        label_term = hil_loss(logits, labels, gamma, detach_weight)
    else:
        raise ValueError(f"mode must be one of {MODES}")
    return {"objective": bns + beta * label_term, "bns": bns, "label_term": label_term, "logits": logits}


def synthesis_objective(x_batch: torch.Tensor, labels: torch.Tensor, teacher: nn.Module, beta: float,
                        gamma: float, mode: str, detach_weight: bool = False) -> torch.Tensor:
    """FNL = BNS + beta * IL, HFNL = BNS + beta * HIL, from one traced teacher pass."""
    return objective_terms(x_batch, labels, teacher, beta, gamma, mode, detach_weight)["objective"]


def synthesize_batch(teacher: nn.Module, labels: torch.Tensor, config: SynthesisConfig, seed: int,
                     bounds: Optional[tuple[torch.Tensor, torch.Tensor]] = None,
                     history: Optional[SynthesisHistory] = None) -> list[SyntheticSample]:
    """Optimize one batch of Gaussian noise towards the teacher's statistics.

    ``bounds`` are the per-channel normalized image limits used for clipping
    when ``config.clip_inputs`` is set. The teacher stays in eval mode and its
    parameters receive no gradient.
    """
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    labels = labels.long()
    gen = torch.Generator().manual_seed(seed)
    dtype = next(teacher.parameters()).dtype
    x = torch.randn((len(labels),) + IMAGE_SHAPE, generator=gen, dtype=dtype).requires_grad_(True)
    opt = torch.optim.Adam([x], lr=config.lr0, betas=(0.9, 0.999))
    # patience counts iterations without improvement beyond the first
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(opt, mode="min", factor=config.lr_decay,
                                                       patience=config.plateau_window - 1, threshold=0.0)
    if history is None:
        history = SynthesisHistory()
    lo = hi = None
    if config.clip_inputs and bounds is not None:
        lo, hi = (b.to(dtype) for b in bounds)
    trace = []
    for t in range(config.iters):
        terms = objective_terms(x, labels, teacher, config.beta, config.gamma, config.mode, config.detach_weight)
        loss = terms["objective"]
        if not torch.isfinite(loss):
            raise DivergenceError(f"synthesis objective became non-finite at iteration {t}")
        value = loss.item()
        trace.append(value)
        history.objective.append(value)
        history.bns.append(terms["bns"].item())
        history.label_term.append(terms["label_term"].item())
        with torch.no_grad():
            history.il.append(F.cross_entropy(terms["logits"], labels).item())
            history.mean_difficulty.append(difficulty_from_logits(terms["logits"], labels).mean().item())
        history.lr.append(opt.param_groups[0]["lr"])
        opt.zero_grad()
        loss.backward()
        opt.step()
        if lo is not None:
            with torch.no_grad():
                x.copy_(torch.maximum(torch.minimum(x, hi), lo))
        sched.step(value)
    x = x.detach()
    d = difficulty(x, labels, teacher)
    trace = np.asarray(trace)
    return [SyntheticSample(x[i], int(labels[i]), float(d[i]), trace) for i in range(len(labels))]


def balanced_labels(n: int, classes: int, batch: int, generator: torch.Generator) -> list[torch.Tensor]:
    """Round-robin labels over ``classes``, split into batches and shuffled within each batch."""
    labels = torch.arange(n) % classes
    out = []
    for i in range(0, n, batch):
        chunk = labels[i:i + batch]
        out.append(chunk[torch.randperm(len(chunk), generator=generator)])
    return out


@dataclass
class SyntheticDataset:
    images: torch.Tensor
    labels: torch.Tensor
    d_teacher: torch.Tensor
    config: SynthesisConfig
    batch_seeds: list[int]
    histories: list[SynthesisHistory] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.float().numpy().astype("<f4").tobytes())
        h.update(self.labels.numpy().astype("<i8").tobytes())
        return h.hexdigest()


def synthesize_dataset(teacher: nn.Module, config: SynthesisConfig,
                       bounds: Optional[tuple[torch.Tensor, torch.Tensor]] = None) -> SyntheticDataset:
    """Synthesize ``config.N`` balanced samples batch by batch.

    A diverging batch is retried once with a fresh seed before the error
    propagates.
    """
    gen = torch.Generator().manual_seed(config.seed)
    xs, ys, ds, seeds, histories = [], [], [], [], []
    for b, labels in enumerate(balanced_labels(config.N, config.classes, config.batch, gen)):
        if len(labels) < 2:
            labels = torch.cat([labels, labels])[:2]
        seed = config.seed * 100_003 + b
        for attempt in range(2):
            hist = SynthesisHistory()
            try:
                samples = synthesize_batch(teacher, labels, config, seed, bounds, hist)
                break
            except DivergenceError:
                if attempt == 1:
                    raise
                log.warning("batch %d diverged with seed %d; retrying", b, seed)
                seed += 1_000_000_007
        seeds.append(seed)
        histories.append(hist)
        xs.append(torch.stack([s.x for s in samples]))
        ys.append(torch.tensor([s.y for s in samples]))
        ds.append(torch.tensor([s.d_teacher for s in samples]))
        log.info("batch %d: objective %.4f -> %.4f, mean difficulty %.3f", b, hist.objective[0],
                 hist.objective[-1], ds[-1].mean().item())
    images, labels, d = torch.cat(xs)[:config.N], torch.cat(ys)[:config.N], torch.cat(ds)[:config.N]
    return SyntheticDataset(images.float(), labels, d, config, seeds, histories)
