"""On-the-fly difficulty promotion: one signed-gradient ascent step on the student's inputs."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn as nn

from .alignment import AlignmentConfig, feature_term, kl_per_sample
from .refmodels import forward_traced

log = logging.getLogger(__name__)

DIRECTIONS = ("KL", "FA", "KL_plus_FA")


@dataclass
class PromotionConfig:
    epsilon: float = 0.01
    direction_loss: str = "KL_plus_FA"
    weight_original: float = 1.0
    weight_promoted: float = 1.0

    def __post_init__(self):
        if self.epsilon < 0 or self.weight_original < 0 or self.weight_promoted < 0:
            raise ValueError("epsilon and loss weights must be non-negative")
        if not self.weight_original + self.weight_promoted > 0:
            raise ValueError("loss weights must not both be zero")
        if self.direction_loss not in DIRECTIONS:
            raise ValueError(f"direction_loss must be one of {DIRECTIONS}")

    @property
    def active(self) -> bool:
        """Whether promoted samples contribute to training at all."""
        return self.epsilon > 0 and self.weight_promoted > 0


@dataclass
class PerturbResult:
    delta: torch.Tensor
    nonfinite: int


def direction_loss(x: torch.Tensor, student: nn.Module, teacher: nn.Module, cfg: PromotionConfig,
                   align: AlignmentConfig) -> torch.Tensor:
    """Per-sample loss whose input gradient gives the perturbation direction."""
    need_features = cfg.direction_loss != "KL"
    logits_t, trace_t, _ = forward_traced(teacher, x, capture_bn=False, capture_features=need_features)
    logits_s, trace_s, _ = forward_traced(student, x, capture_bn=False, capture_features=need_features)
    loss = torch.zeros(x.shape[0], dtype=x.dtype)
    if cfg.direction_loss in ("KL", "KL_plus_FA"):
        loss = loss + align.alpha * kl_per_sample(torch.softmax(logits_t, 1), torch.softmax(logits_s, 1))
    if cfg.direction_loss in ("FA", "KL_plus_FA"):
        loss = loss + align.lam * feature_term(trace_t, trace_s, align, reduction="none")
    return loss


def perturb(x_batch: torch.Tensor, student: nn.Module, teacher: nn.Module, cfg: PromotionConfig,
            align: AlignmentConfig | None = None) -> PerturbResult:
    """``delta = epsilon * sign(grad_x L_dir)``, bounded by ``epsilon`` in the max norm.

    Only the input gradient is taken, so parameter ``.grad`` fields of both
    networks are left untouched. Samples whose gradient contains non-finite
    entries get a zero perturbation and are counted.
    """
    if cfg.epsilon == 0:
        return PerturbResult(torch.zeros_like(x_batch), 0)
    align = align or AlignmentConfig()
    x = x_batch.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        loss = direction_loss(x, student, teacher, cfg, align).sum()
        (grad,) = torch.autograd.grad(loss, x)
    finite = torch.isfinite(grad).flatten(1).all(1)
    nonfinite = int((~finite).sum())
    if nonfinite:
        log.warning("zeroing perturbation for %d samples with non-finite gradients", nonfinite)
    eps = torch.tensor(cfg.epsilon, dtype=x.dtype)
    if float(eps) > cfg.epsilon:
        # the input dtype rounded epsilon up; step down so the bound holds exactly
        eps = torch.nextafter(eps, torch.zeros_like(eps))
    delta = eps * torch.sign(torch.nan_to_num(grad, nan=0.0, posinf=0.0, neginf=0.0))
    delta = delta * finite.view(-1, *([1] * (x.dim() - 1))).to(delta.dtype)
    return PerturbResult(delta.detach(), nonfinite)


def promoted_batch(x_batch: torch.Tensor, delta: torch.Tensor,
                   cfg: PromotionConfig) -> list[tuple[torch.Tensor, float]]:
    """Training inputs paired with normalized loss weights ``a/(a+b)`` and ``b/(a+b)``.

    Zero-weight entries are dropped.
    """
    if x_batch.shape != delta.shape:
        raise ValueError("perturbation shape does not match the batch")
    total = cfg.weight_original + cfg.weight_promoted
    pairs = [(x_batch, cfg.weight_original / total), (x_batch + delta, cfg.weight_promoted / total)]
    return [(x, w) for x, w in pairs if w > 0]
