"""Small BN-equipped reference networks and an instrumented forward pass.

Both architectures expose ``probe_names``: the module names whose outputs
form the feature trace used by feature alignment. Probes are post-activation
outputs of each residual stage (``tiny_resnet``) or each conv block
(``small_cnn``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

ARCHS = ("tiny_resnet", "small_cnn")
BN_STD_EPS = 1e-8


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class TinyResNet(nn.Module):
    """Three-stage residual net in the ResNet-20 mould, one block per stage."""

    arch = "tiny_resnet"

    def __init__(self, num_classes: int = 10, width: int = 16):
        super().__init__()
        self.num_classes = num_classes
        self.width = width
        w = width
        self.conv1 = nn.Conv2d(3, w, 3, 1, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(w)
        self.layer1 = BasicBlock(w, w, 1)
        self.layer2 = BasicBlock(w, 2 * w, 2)
        self.layer3 = BasicBlock(2 * w, 4 * w, 2)
        self.fc = nn.Linear(4 * w, num_classes)
        self.probe_names = ["layer1", "layer2", "layer3"]

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.layer3(self.layer2(self.layer1(out)))
        out = F.adaptive_avg_pool2d(out, 1).flatten(1)
        return self.fc(out)


class SmallCNN(nn.Module):
    """Four conv-BN-ReLU blocks with 2x pooling between them."""

    arch = "small_cnn"

    def __init__(self, num_classes: int = 10, width: int = 16):
        super().__init__()
        self.num_classes = num_classes
        self.width = width
        chans = [3, width, 2 * width, 4 * width, 4 * width]
        for i in range(4):
            block = nn.Sequential(nn.Conv2d(chans[i], chans[i + 1], 3, 1, 1, bias=False),
                                  nn.BatchNorm2d(chans[i + 1]), nn.ReLU())
            self.add_module(f"block{i + 1}", block)
        self.fc = nn.Linear(chans[-1], num_classes)
        self.probe_names = ["block2", "block3", "block4"]

    def forward(self, x):
        out = self.block1(x)
        out = self.block2(F.max_pool2d(out, 2))
        out = self.block3(F.max_pool2d(out, 2))
        out = self.block4(F.max_pool2d(out, 2))
        out = F.adaptive_avg_pool2d(out, 1).flatten(1)
        return self.fc(out)


def build_teacher(arch: str, classes: int, width: int = 16) -> nn.Module:
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if arch == "tiny_resnet":
        return TinyResNet(classes, width)
    if arch == "small_cnn":
        return SmallCNN(classes, width)
    raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHS}")


@dataclass
class LayerStats:
    layer_index: int
    mu_stored: torch.Tensor
    sigma_stored: torch.Tensor
    mu_batch: torch.Tensor
    sigma_batch: torch.Tensor


@dataclass
class FeatureTrace:
    entries: list[tuple[int, torch.Tensor]] = field(default_factory=list)

    @property
    def layers(self) -> list[int]:
        return [i for i, _ in self.entries]

    @property
    def features(self) -> list[torch.Tensor]:
        return [f for _, f in self.entries]


def _module_table(model: nn.Module) -> dict[str, nn.Module]:
    if hasattr(model, "named_modules_for_probe"):
        return model.named_modules_for_probe()
    return dict(model.named_modules())


def bn_layers(model: nn.Module) -> list[nn.BatchNorm2d]:
    return [m for m in _module_table(model).values() if isinstance(m, nn.BatchNorm2d)]


def forward_traced(model: nn.Module, x: torch.Tensor, capture_bn: bool = True,
                   capture_features: bool = True) -> tuple[torch.Tensor, FeatureTrace, list[LayerStats]]:
    """One forward pass returning logits, probe features and per-BN-layer statistics.

    Batch statistics are taken from each BN layer's input (per channel over
    batch and spatial positions) and stay attached to the autograd graph.
    The model's normalization mode is not changed.
    """
    if capture_bn and x.shape[0] < 2:
        raise ValueError("batch statistics need a batch of at least 2 samples")
    table = _module_table(model)
    probe_names = list(getattr(model, "probe_names", []))
    feats: dict[int, torch.Tensor] = {}
    stats: list[LayerStats] = []
    handles = []

    if capture_features:
        for idx, name in enumerate(probe_names):
            def hook(_m, _inp, out, idx=idx):
                feats[idx] = out
            handles.append(table[name].register_forward_hook(hook))

    if capture_bn:
        for idx, bn in enumerate(m for m in table.values() if isinstance(m, nn.BatchNorm2d)):
            def pre_hook(m, inp, idx=idx):
                a = inp[0]
                mu = a.mean(dim=(0, 2, 3))
                var = a.var(dim=(0, 2, 3), unbiased=False)
                stats.append(LayerStats(idx, m.running_mean.detach().to(a.dtype),
                                        m.running_var.detach().to(a.dtype).sqrt(),
                                        mu, torch.sqrt(var + BN_STD_EPS)))
            handles.append(bn.register_forward_pre_hook(pre_hook))
    try:
        logits = model(x)
    finally:
        for h in handles:
            h.remove()
    trace = FeatureTrace([(i, feats[i]) for i in sorted(feats)])
    stats.sort(key=lambda s: s.layer_index)
    return logits, trace, stats


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model
