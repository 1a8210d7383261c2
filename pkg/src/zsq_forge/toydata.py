"""Procedural 3x32x32 image classes and teacher training on them.

Ten pattern families (bars at four orientations, rings, checkers, linear
gradients, blobs, radial spots, crosses) are rendered with random colours,
frequencies, phases and positions plus pixel noise, clipped to [0, 1] and
normalized per channel with constants computed on the train split.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

IMAGE_SHAPE = (3, 32, 32)
MAX_CLASSES = 10
PATTERNS = ("bars_0", "bars_45", "bars_90", "bars_135", "rings", "checkers",
            "gradient", "blobs", "spot", "cross")


class DivergenceError(RuntimeError):
    """Training or synthesis produced a non-finite loss."""


@dataclass
class ToyDataset:
    images: torch.Tensor
    labels: torch.Tensor
    split: str
    seed: int
    mean: list[float] = field(default_factory=list)
    std: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def bounds(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-channel normalized values of pixel intensities 0 and 1, shaped (1, C, 1, 1)."""
        mean = torch.tensor(self.mean).view(1, -1, 1, 1)
        std = torch.tensor(self.std).view(1, -1, 1, 1)
        return (0 - mean) / std, (1 - mean) / std

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.numpy().astype("<f4").tobytes())
        h.update(self.labels.numpy().astype("<i8").tobytes())
        return h.hexdigest()


def _render(kind: int, rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    """Return a [0, 1] intensity mask for one pattern instance."""
    name = PATTERNS[kind]
    if name.startswith("bars"):
        theta = math.radians(float(name.split("_")[1]) + rng.uniform(-8, 8))
        freq = rng.uniform(2.5, 5.0)
        proj = xx * math.cos(theta) + yy * math.sin(theta)
        return (np.sin(2 * math.pi * freq * proj + rng.uniform(0, 2 * math.pi)) > 0).astype(np.float64)
    if name == "rings":
        cy, cx = rng.uniform(0.3, 0.7, size=2)
        r = np.hypot(yy - cy, xx - cx)
        return (np.sin(2 * math.pi * rng.uniform(3.0, 5.0) * r + rng.uniform(0, 2 * math.pi)) > 0).astype(np.float64)
    if name == "checkers":
        f = rng.uniform(2.0, 4.0)
        a = np.sin(2 * math.pi * f * xx + rng.uniform(0, 2 * math.pi))
        b = np.sin(2 * math.pi * f * yy + rng.uniform(0, 2 * math.pi))
        return (a * b > 0).astype(np.float64)
    if name == "gradient":
        theta = rng.uniform(0, 2 * math.pi)
        proj = (xx - 0.5) * math.cos(theta) + (yy - 0.5) * math.sin(theta)
        return np.clip(0.5 + proj * rng.uniform(0.9, 1.4), 0, 1)
    if name == "blobs":
        out = np.zeros_like(xx)
        for _ in range(rng.integers(2, 5)):
            cy, cx = rng.uniform(0.1, 0.9, size=2)
            s = rng.uniform(0.05, 0.09)
            out = np.maximum(out, np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s)))
        return out
    if name == "spot":
        cy, cx = rng.uniform(0.3, 0.7, size=2)
        s = rng.uniform(0.18, 0.28)
        return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    if name == "cross":
        cy, cx = rng.uniform(0.3, 0.7, size=2)
        half = rng.uniform(0.05, 0.09)
        return ((np.abs(yy - cy) < half) | (np.abs(xx - cx) < half)).astype(np.float64)
    raise ValueError(kind)


def _render_split(rng: np.random.Generator, classes: int, per_class: int, noise: float) -> tuple[np.ndarray, np.ndarray]:
    coords = (np.arange(32) + 0.5) / 32
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    labels = np.repeat(np.arange(classes), per_class)
    labels = labels[rng.permutation(len(labels))]
    images = np.empty((len(labels),) + IMAGE_SHAPE, dtype=np.float64)
    for i, k in enumerate(labels):
        mask = _render(int(k), rng, yy, xx)
        fg, bg = rng.uniform(0, 1, size=(2, 3))
        while np.abs(fg - bg).sum() < 0.6:
            fg, bg = rng.uniform(0, 1, size=(2, 3))
        img = bg[:, None, None] + mask[None] * (fg - bg)[:, None, None]
        img = img + rng.normal(0, noise, size=img.shape)
        images[i] = np.clip(img, 0, 1)
    return images, labels


def generate_toy_dataset(seed: int, classes: int = 10, per_class_train: int = 500, per_class_test: int = 100,
                         noise: float = 0.15) -> tuple[ToyDataset, ToyDataset]:
    """Render deterministic, class-balanced train and test splits."""
    if per_class_train < 1 or per_class_test < 1:
        raise ValueError("per-class counts must be at least 1")
    if not 2 <= classes <= MAX_CLASSES:
        raise ValueError(f"classes must be in [2, {MAX_CLASSES}]")
    rng = np.random.default_rng(seed)
    train_x, train_y = _render_split(rng, classes, per_class_train, noise)
    test_x, test_y = _render_split(rng, classes, per_class_test, noise)
    mean = train_x.mean(axis=(0, 2, 3))
    std = train_x.std(axis=(0, 2, 3))

    def wrap(x, y, split):
        x = ((x - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32)
        return ToyDataset(torch.from_numpy(x), torch.from_numpy(y.astype(np.int64)), split, seed,
                          mean.tolist(), std.tolist())

    return wrap(train_x, train_y, "train"), wrap(test_x, test_y, "test")


def dataset_manifest(train: ToyDataset, test: ToyDataset) -> dict:
    return {
        "seed": train.seed,
        "classes": train.num_classes,
        "train_count": len(train),
        "test_count": len(test),
        "normalization": {"mean": train.mean, "std": train.std},
        "train_sha256": train.digest(),
        "test_sha256": test.digest(),
    }


def random_crop(x: torch.Tensor, pad: int, generator: torch.Generator) -> torch.Tensor:
    if pad <= 0:
        return x
    n, _, h, w = x.shape
    padded = F.pad(x, (pad, pad, pad, pad))
    oy = torch.randint(0, 2 * pad + 1, (n,), generator=generator)
    ox = torch.randint(0, 2 * pad + 1, (n,), generator=generator)
    rows = (oy[:, None] + torch.arange(h)[None])[:, None, :, None]
    cols = (ox[:, None] + torch.arange(w)[None])[:, None, None, :]
    idx_n = torch.arange(n)[:, None, None, None]
    idx_c = torch.arange(x.shape[1])[None, :, None, None]
    return padded[idx_n, idx_c, rows, cols]


def random_flip(x: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    flip = torch.rand(x.shape[0], generator=generator) < 0.5
    return torch.where(flip[:, None, None, None], x.flip(3), x)


@torch.no_grad()
def accuracy(model: nn.Module, images: torch.Tensor, labels: torch.Tensor, batch: int = 500) -> float:
    was_training = model.training
    model.eval()
    correct = 0
    for i in range(0, len(labels), batch):
        correct += (model(images[i:i + batch]).argmax(1) == labels[i:i + batch]).sum().item()
    model.train(was_training)
    return correct / len(labels)


@dataclass
class TeacherReport:
    train_top1: float
    test_top1: float
    epochs: int
    losses: list[float]


def train_teacher(model: nn.Module, train: ToyDataset, test: ToyDataset, epochs: int = 8, lr: float = 0.05,
                  batch: int = 128, seed: int = 0, crop_pad: int = 2) -> tuple[nn.Module, TeacherReport]:
    """SGD with momentum and a cosine schedule; deterministic given ``seed``."""
    if len(train) == 0:
        raise ValueError("train split is empty")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=0.9, weight_decay=5e-4, nesterov=True)
    steps = max(1, epochs * math.ceil(len(train) / batch))
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    losses = []
    for epoch in range(epochs):
        model.train()
        order = torch.randperm(len(train), generator=gen)
        total = 0.0
        for i in range(0, len(order), batch):
            idx = order[i:i + batch]
            if len(idx) < 2:
                continue
            xb = random_crop(train.images[idx], crop_pad, gen)
            loss = F.cross_entropy(model(xb), train.labels[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(f"teacher loss became non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
        losses.append(total / len(train))
        log.info("teacher epoch %d loss %.4f", epoch, losses[-1])
    model.eval()
    report = TeacherReport(accuracy(model, train.images, train.labels), accuracy(model, test.images, test.labels),
                           epochs, losses)
    return model, report
