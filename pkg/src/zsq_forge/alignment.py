"""Teacher-student alignment terms: attention vectors, KL, and the FA objective."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .refmodels import FeatureTrace

PROB_FLOOR = 1e-12


@dataclass
class AlignmentConfig:
    lam: float = 1.0
    alpha: float = 1.0
    mode: str = "relaxed"
    normalize_attention: bool = True

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.mode not in ("relaxed", "direct"):
            raise ValueError(f"unknown alignment mode {self.mode!r}")


def attention_vector(f: torch.Tensor, normalize: bool = True) -> torch.Tensor:
    """Per-channel sum of squared activations, for (C, H, W) or batched (N, C, H, W) features."""
    att = f.pow(2).sum(dim=(-2, -1))
    if normalize:
        att = F.normalize(att, p=2, dim=-1, eps=PROB_FLOOR)
    return att


def attention_metric(f_teacher: torch.Tensor, f_student: torch.Tensor, normalize: bool = True,
                     reduction: str = "mean") -> torch.Tensor:
    """Squared L2 distance between attention vectors; per sample, batch-averaged by default."""
    if f_teacher.shape != f_student.shape:
        raise ValueError(f"feature shapes differ: {tuple(f_teacher.shape)} vs {tuple(f_student.shape)}")
    d = (attention_vector(f_teacher, normalize) - attention_vector(f_student, normalize)).pow(2).sum(-1)
    return d.mean() if reduction == "mean" and d.dim() else d


def kl_per_sample(probs_t: torch.Tensor, probs_s: torch.Tensor) -> torch.Tensor:
    return (probs_t * (probs_t.clamp_min(PROB_FLOOR).log() - probs_s.clamp_min(PROB_FLOOR).log())).sum(1)


def kl_term(probs_t: torch.Tensor, probs_s: torch.Tensor) -> torch.Tensor:
    return kl_per_sample(probs_t, probs_s).mean()


def feature_term(traces_t: FeatureTrace, traces_s: FeatureTrace, cfg: AlignmentConfig,
                 reduction: str = "mean") -> torch.Tensor:
    """Mean over probe layers of the per-layer feature distance."""
    if traces_t.layers != traces_s.layers:
        raise ValueError(f"probe sets differ: {traces_t.layers} vs {traces_s.layers}")
    if not traces_t.entries:
        raise ValueError("empty probe set")
    per_layer = []
    for f_t, f_s in zip(traces_t.features, traces_s.features):
        if cfg.mode == "relaxed":
            per_layer.append(attention_metric(f_t, f_s, cfg.normalize_attention, reduction="none"))
        else:
            if f_t.shape != f_s.shape:
                raise ValueError("feature shapes differ")
            per_layer.append((f_t - f_s).pow(2).flatten(1).mean(1))
    per_sample = torch.stack(per_layer).mean(0)
    return per_sample.mean() if reduction == "mean" else per_sample


def fa_terms(traces_t: FeatureTrace, traces_s: FeatureTrace, probs_t: torch.Tensor, probs_s: torch.Tensor,
             cfg: AlignmentConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Return the weighted feature term ``lam * feat`` and the weighted KL term ``alpha * KL``."""
    return cfg.lam * feature_term(traces_t, traces_s, cfg), cfg.alpha * kl_term(probs_t, probs_s)


def fa_objective(traces_t: FeatureTrace, traces_s: FeatureTrace, probs_t: torch.Tensor, probs_s: torch.Tensor,
                 cfg: AlignmentConfig) -> torch.Tensor:
    feat, kl = fa_terms(traces_t, traces_s, probs_t, probs_s, cfg)
    return feat + kl


def grad_cosine_similarity(loss_a: torch.Tensor, loss_b: torch.Tensor, params: Sequence[torch.Tensor] | nn.Module) -> float:
    """Cosine between the parameter gradients of two losses; ``nan`` if either gradient is zero."""
    if isinstance(params, nn.Module):
        params = [p for p in params.parameters() if p.requires_grad]
    params = list(params)
    ga = torch.autograd.grad(loss_a, params, retain_graph=True, allow_unused=True)
    gb = torch.autograd.grad(loss_b, params, retain_graph=True, allow_unused=True)
    va = torch.cat([(g if g is not None else torch.zeros_like(p)).flatten() for g, p in zip(ga, params)]).double()
    vb = torch.cat([(g if g is not None else torch.zeros_like(p)).flatten() for g, p in zip(gb, params)]).double()
    na, nb = va.norm(), vb.norm()
    if na == 0 or nb == 0:
        return math.nan
    return float(torch.clamp(va @ vb / (na * nb), -1.0, 1.0))

