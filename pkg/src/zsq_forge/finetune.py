"""Fine-tuning a fake-quantized student against a frozen teacher on synthetic data.

Two objectives are supported: ``HAST`` (feature alignment + KL on original
and difficulty-promoted inputs) and ``baseline_CE_KL`` (cross-entropy on the
synthesis labels + KL). The student runs with its BN layers in inference
mode throughout; its BN affine parameters are still trained.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .alignment import AlignmentConfig, fa_terms, grad_cosine_similarity, kl_term
from .promotion import PromotionConfig, perturb, promoted_batch
from .quantizer import FakeQuantModel, calibrate
from .refmodels import forward_traced
from .toydata import DivergenceError, random_crop, random_flip

log = logging.getLogger(__name__)

OBJECTIVES = ("HAST", "baseline_CE_KL")


@dataclass
class FinetuneConfig:
    epochs: int = 150
    lr0: float = 1e-5
    lr_step: int = 100
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch: int = 256
    objective: str = "HAST"
    promotion: PromotionConfig = field(default_factory=PromotionConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    seed: int = 0
    crop_pad: int = 4
    flip: bool = True
    freeze_act_ranges: bool = True
    diag_every: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not self.lr0 >= 0:
            raise ValueError("lr0 must be non-negative")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")


@dataclass
class TrainState:
    student: FakeQuantModel
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    metrics: list[dict] = field(default_factory=list)
    diagnostics: list[dict] = field(default_factory=list)
    best_top1: float = -1.0
    best_epoch: int = -1
    best_state: Optional[dict] = None
    iteration: int = 0
    perturb_warnings: int = 0

    @property
    def final_top1(self) -> float:
        return self.metrics[-1]["test_top1"] if self.metrics else math.nan


@dataclass
class StepResult:
    loss: float
    fa_term: float
    kl_term: float


def make_optimizer(student: nn.Module, cfg: FinetuneConfig) -> torch.optim.SGD:
    """SGD with Nesterov momentum; biases and BN parameters are exempt from weight decay."""
    decay, no_decay = [], []
    for p in student.parameters():
        if p.requires_grad:
            (no_decay if p.ndim <= 1 else decay).append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.SGD(groups, lr=cfg.lr0, momentum=cfg.momentum, nesterov=cfg.momentum > 0)


def make_student(teacher: nn.Module, calibration: torch.Tensor, weight_bits: int, act_bits: int,
                 batch: int = 256, act_decay: float = 0.9) -> FakeQuantModel:
    """Copy the teacher, wrap every layer with fake quantizers, calibrate on one pass."""
    student = FakeQuantModel(teacher, weight_bits, act_bits, act_decay)
    for p in student.parameters():
        p.requires_grad_(True)
    student.eval()
    calibrate(student, (calibration[i:i + batch] for i in range(0, len(calibration), batch)))
    return student


def _hast_loss(x: torch.Tensor, student: nn.Module, teacher: nn.Module, align: AlignmentConfig):
    with torch.no_grad():
        logits_t, trace_t, _ = forward_traced(teacher, x, capture_bn=False)
    logits_s, trace_s, _ = forward_traced(student, x, capture_bn=False)
    feat, kl = fa_terms(trace_t, trace_s, torch.softmax(logits_t, 1), torch.softmax(logits_s, 1), align)
    return feat + kl, feat, kl


def _baseline_loss(x: torch.Tensor, y: torch.Tensor, student: nn.Module, teacher: nn.Module, alpha: float):
    with torch.no_grad():
        p_t = torch.softmax(teacher(x), 1)
    logits_s = student(x)
    ce = F.cross_entropy(logits_s, y)
    kl = alpha * kl_term(p_t, torch.softmax(logits_s, 1))
    return ce + kl, torch.zeros((), dtype=ce.dtype), kl


def training_loss(x: torch.Tensor, y: torch.Tensor, student: nn.Module, teacher: nn.Module, cfg: FinetuneConfig,
                  promotion: bool = True) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, int]:
    """Weighted loss over original and promoted inputs, plus its FA and KL parts."""
    pcfg = cfg.promotion
    warnings = 0
    if promotion and pcfg.active:
        res = perturb(x, student, teacher, pcfg, cfg.alignment)
        warnings = res.nonfinite
        inputs = promoted_batch(x, res.delta, pcfg)
    else:
        inputs = [(x, 1.0)]
    total = fa = kl = 0.0
    for xi, w in inputs:
        if cfg.objective == "HAST":
            loss, f, k = _hast_loss(xi, student, teacher, cfg.alignment)
        else:
            loss, f, k = _baseline_loss(xi, y, student, teacher, cfg.alignment.alpha)
        total = total + w * loss
        fa = fa + w * f.detach()
        kl = kl + w * k.detach()
    return total, torch.as_tensor(fa), torch.as_tensor(kl), warnings


def _step(batch, state: TrainState, teacher: nn.Module, cfg: FinetuneConfig) -> StepResult:
    x, y = batch
    student = state.student
    student.eval()
    loss, fa, kl, warnings = training_loss(x, y, student, teacher, cfg)
    state.perturb_warnings += warnings
    if not torch.isfinite(loss):
        raise DivergenceError(f"fine-tuning loss became non-finite at iteration {state.iteration}")
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    state.iteration += 1
    return StepResult(loss.item(), float(fa), float(kl))


def hast_step(batch, state: TrainState, teacher: nn.Module, cfg: FinetuneConfig) -> StepResult:
    """One update minimizing the FA objective over original and promoted inputs."""
    if cfg.objective != "HAST":
        cfg = _with_objective(cfg, "HAST")
    return _step(batch, state, teacher, cfg)


def baseline_step(batch, state: TrainState, teacher: nn.Module, cfg: FinetuneConfig) -> StepResult:
    """One update minimizing cross-entropy on synthesis labels plus ``alpha`` times KL."""
    if cfg.objective != "baseline_CE_KL":
        cfg = _with_objective(cfg, "baseline_CE_KL")
    return _step(batch, state, teacher, cfg)


def _with_objective(cfg: FinetuneConfig, objective: str) -> FinetuneConfig:
    out = copy.copy(cfg)
    out.objective = objective
    return out


def cosine_diagnostics(x: torch.Tensor, y: torch.Tensor, student: nn.Module, teacher: nn.Module,
                       align: AlignmentConfig) -> dict:
    """Parameter-gradient cosines FA-vs-KL and CE-vs-KL on one batch."""
    student.eval()
    with torch.no_grad():
        logits_t, trace_t, _ = forward_traced(teacher, x, capture_bn=False)
    logits_s, trace_s, _ = forward_traced(student, x, capture_bn=False)
    feat, kl = fa_terms(trace_t, trace_s, torch.softmax(logits_t, 1), torch.softmax(logits_s, 1), align)
    ce = F.cross_entropy(logits_s, y)
    params = [p for p in student.parameters() if p.requires_grad]
    return {"cos_fa_kl": grad_cosine_similarity(feat, kl, params),
            "cos_ce_kl": grad_cosine_similarity(ce, kl, params)}


@torch.no_grad()
def evaluate(model: nn.Module, images: torch.Tensor, labels: torch.Tensor, batch: int = 500) -> float:
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty set")
    was_training = model.training
    model.eval()
    correct = 0
    for i in range(0, len(labels), batch):
        correct += int((model(images[i:i + batch]).argmax(1) == labels[i:i + batch]).sum())
    model.train(was_training)
    return correct / len(labels)


def _batches(images: torch.Tensor, labels: torch.Tensor, cfg: FinetuneConfig,
             gen: torch.Generator) -> Iterable[tuple[torch.Tensor, torch.Tensor]]:
    order = torch.randperm(len(labels), generator=gen)
    for i in range(0, len(order), cfg.batch):
        idx = order[i:i + cfg.batch]
        x = random_crop(images[idx], cfg.crop_pad, gen)
        if cfg.flip:
            x = random_flip(x, gen)
        yield x, labels[idx]


def finetune(images: torch.Tensor, labels: torch.Tensor, teacher: nn.Module, student: FakeQuantModel,
             cfg: FinetuneConfig, test: Optional[tuple[torch.Tensor, torch.Tensor]] = None) -> TrainState:
    """Run the epoch loop with a step-decay schedule and per-epoch metrics.

    On divergence the raised error carries the state, whose ``best_state``
    holds the last good student weights.
    """
    if len(labels) == 0:
        raise ValueError("synthetic dataset is empty")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    student.set_range_tracking(not cfg.freeze_act_ranges)
    state = TrainState(student, make_optimizer(student, cfg))
    sched = torch.optim.lr_scheduler.StepLR(state.optimizer, step_size=cfg.lr_step, gamma=cfg.lr_decay)
    step = hast_step if cfg.objective == "HAST" else baseline_step
    for epoch in range(cfg.epochs):
        lr = state.optimizer.param_groups[0]["lr"]
        sums = {"loss": 0.0, "fa": 0.0, "kl": 0.0}
        seen = 0
        for x, y in _batches(images, labels, cfg, gen):
            if cfg.diag_every and state.iteration % cfg.diag_every == 0:
                diag = cosine_diagnostics(x, y, student, teacher, cfg.alignment)
                state.diagnostics.append({"iteration": state.iteration, "epoch": epoch, **diag})
            try:
                res = step((x, y), state, teacher, cfg)
            except DivergenceError as err:
                err.state = state
                raise
            n = len(y)
            sums["loss"] += res.loss * n
            sums["fa"] += res.fa_term * n
            sums["kl"] += res.kl_term * n
            seen += n
        sched.step()
        state.epoch = epoch + 1
        top1 = evaluate(student, *test) if test is not None else math.nan
        state.metrics.append({"epoch": epoch, "lr": lr, "train_loss": sums["loss"] / seen,
                              "fa_term": sums["fa"] / seen, "kl_term": sums["kl"] / seen, "test_top1": top1})
        if test is not None and top1 > state.best_top1:
            state.best_top1, state.best_epoch = top1, epoch
            state.best_state = copy.deepcopy(student.state_dict())
        log.info("epoch %d lr %.2e loss %.5f top1 %.4f", epoch, lr, sums["loss"] / seen, top1)
    return state
