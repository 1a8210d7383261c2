"""Asymmetric uniform fake quantization for weights and activations.

A real value ``x`` clipped to ``[l, u]`` maps to the signed integer
``round(x * S - z)`` with ``S = (2^n - 1) / (u - l)`` and
``z = S * l + 2^(n-1)``; dequantization is ``(q + z) / S``. The integer grid
is therefore ``[-2^(n-1), 2^(n-1) - 1]`` and ``l``/``u`` land exactly on its
ends.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Iterator

import torch
import torch.nn as nn
import torch.nn.functional as F

MIN_BITS = 2
MAX_BITS = 8
RANGE_GUARD = 1e-8


class QuantizationError(ValueError):
    """Invalid quantization bounds or bit-width."""


@dataclass(frozen=True)
class QuantParams:
    n: int
    l: float
    u: float

    def __post_init__(self):
        if not isinstance(self.n, int) or not MIN_BITS <= self.n <= MAX_BITS:
            raise QuantizationError(f"bit-width must be an integer in [{MIN_BITS}, {MAX_BITS}], got {self.n!r}")
        if not self.u > self.l:
            raise QuantizationError(f"upper bound must exceed lower bound, got l={self.l}, u={self.u}")

    @cached_property
    def scale(self) -> float:
        return (2**self.n - 1) / (self.u - self.l)

    @cached_property
    def zero_point(self) -> float:
        return self.scale * self.l + 2 ** (self.n - 1)

    @property
    def qmin(self) -> int:
        return -(2 ** (self.n - 1))

    @property
    def qmax(self) -> int:
        return 2 ** (self.n - 1) - 1

    def as_record(self, layer_id: str, kind: str) -> dict:
        return {"layer_id": layer_id, "kind": kind, "n": self.n, "l": self.l, "u": self.u}


@dataclass(frozen=True)
class QuantizedTensor:
    values: torch.Tensor
    params: QuantParams


def compute_params(l: float, u: float, n: int) -> QuantParams:
    return QuantParams(n=int(n), l=float(l), u=float(u))


def guarded_range(lo: float, hi: float) -> tuple[float, float]:
    """Widen a degenerate ``[lo, hi]`` symmetrically about its midpoint."""
    if hi - lo < RANGE_GUARD:
        mid = 0.5 * (lo + hi)
        return mid - RANGE_GUARD, mid + RANGE_GUARD
    return lo, hi


def quantize(x: torch.Tensor, p: QuantParams) -> QuantizedTensor:
    # torch.round resolves ties half-to-even
    q = torch.round(torch.clamp(x, p.l, p.u) * p.scale - p.zero_point)
    q = torch.clamp(q, p.qmin, p.qmax).to(torch.int32)
    return QuantizedTensor(q, p)


def dequantize(q: QuantizedTensor, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    p = q.params
    return (q.values.to(dtype) + p.zero_point) / p.scale


def fake_quantize(x: torch.Tensor, p: QuantParams) -> torch.Tensor:
    """Quantize-dequantize ``x`` with a clipped straight-through gradient.

    The backward pass treats rounding as identity inside ``[l, u]`` and
    passes zero gradient for clipped elements.
    """
    clipped = torch.clamp(x, p.l, p.u)
    q = torch.round(clipped * p.scale - p.zero_point).clamp(p.qmin, p.qmax)
    xq = (q + p.zero_point) / p.scale
    return clipped + (xq - clipped).detach()


class ActQuantizer(nn.Module):
    """Per-tensor activation quantizer with an EMA min/max observer."""

    def __init__(self, bits: int, decay: float = 0.9):
        super().__init__()
        self.bits = bits
        self.decay = decay
        self.observing = False
        self.tracking = False
        self.enabled = True
        self.register_buffer("running_min", torch.tensor(float("nan"), dtype=torch.float64))
        self.register_buffer("running_max", torch.tensor(float("nan"), dtype=torch.float64))

    @property
    def calibrated(self) -> bool:
        return not bool(torch.isnan(self.running_min))

    @property
    def params(self) -> QuantParams:
        if not self.calibrated:
            raise QuantizationError("activation site has not been calibrated")
        return compute_params(*guarded_range(float(self.running_min), float(self.running_max)), self.bits)

    def set_params(self, p: QuantParams):
        self.bits = p.n
        self.running_min.fill_(p.l)
        self.running_max.fill_(p.u)

    def reset(self):
        self.running_min.fill_(float("nan"))
        self.running_max.fill_(float("nan"))

    def observe(self, x: torch.Tensor):
        lo, hi = x.detach().min().double(), x.detach().max().double()
        if not self.calibrated:
            self.running_min.copy_(lo)
            self.running_max.copy_(hi)
        else:
            self.running_min.mul_(self.decay).add_((1 - self.decay) * lo)
            self.running_max.mul_(self.decay).add_((1 - self.decay) * hi)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.observing:
            self.observe(x)
            return x
        if not self.enabled:
            return x
        if self.tracking:
            self.observe(x)
        return fake_quantize(x, self.params)

    def extra_repr(self) -> str:
        return f"bits={self.bits}, decay={self.decay}"


class _QuantLayerMixin:
    """Shared weight/activation handling for quantized conv and linear layers.

    Weight ranges follow the current weights (exact per-tensor min/max)
    unless ``dynamic_weight_range`` is off, in which case the range captured
    at calibration is used.
    """

    def _init_quant(self, weight_bits: int, act_bits: int, decay: float, dynamic_weight_range: bool):
        self.weight_bits = weight_bits
        self.dynamic_weight_range = dynamic_weight_range
        self.quant_enabled = True
        self.act_quant = ActQuantizer(act_bits, decay)
        self.register_buffer("weight_range", torch.tensor([float("nan"), float("nan")], dtype=torch.float64))

    @property
    def weight_params(self) -> QuantParams:
        if self.dynamic_weight_range or torch.isnan(self.weight_range).any():
            w = self.weight.detach()
            lo, hi = float(w.min()), float(w.max())
        else:
            lo, hi = float(self.weight_range[0]), float(self.weight_range[1])
        return compute_params(*guarded_range(lo, hi), self.weight_bits)

    def set_weight_params(self, p: QuantParams):
        self.weight_bits = p.n
        self.weight_range.copy_(torch.tensor([p.l, p.u], dtype=torch.float64))

    def capture_weight_range(self):
        w = self.weight.detach()
        self.weight_range.copy_(torch.tensor([float(w.min()), float(w.max())], dtype=torch.float64))

    def quantized_weight(self) -> torch.Tensor:
        if not self.quant_enabled or self.act_quant.observing:
            return self.weight
        return fake_quantize(self.weight, self.weight_params)


class QuantConv2d(_QuantLayerMixin, nn.Conv2d):
    @classmethod
    def from_float(cls, conv: nn.Conv2d, weight_bits: int, act_bits: int, decay: float = 0.9,
                   dynamic_weight_range: bool = True) -> "QuantConv2d":
        q = cls(conv.in_channels, conv.out_channels, conv.kernel_size, stride=conv.stride,
                padding=conv.padding, dilation=conv.dilation, groups=conv.groups,
                bias=conv.bias is not None, padding_mode=conv.padding_mode,
                device=conv.weight.device, dtype=conv.weight.dtype)
        q.load_state_dict(conv.state_dict())
        q._init_quant(weight_bits, act_bits, decay, dynamic_weight_range)
        return q

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.act_quant(x) if self.quant_enabled else x
        return self._conv_forward(x, self.quantized_weight(), self.bias)


class QuantLinear(_QuantLayerMixin, nn.Linear):
    @classmethod
    def from_float(cls, linear: nn.Linear, weight_bits: int, act_bits: int, decay: float = 0.9,
                   dynamic_weight_range: bool = True) -> "QuantLinear":
        q = cls(linear.in_features, linear.out_features, bias=linear.bias is not None,
                device=linear.weight.device, dtype=linear.weight.dtype)
        q.load_state_dict(linear.state_dict())
        q._init_quant(weight_bits, act_bits, decay, dynamic_weight_range)
        return q

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.act_quant(x) if self.quant_enabled else x
        return F.linear(x, self.quantized_weight(), self.bias)


QUANT_LAYERS = (QuantConv2d, QuantLinear)


class FakeQuantModel(nn.Module):
    """A copy of a full-precision network with every conv/linear layer quantized.

    Each quantized layer owns one weight quantizer and one activation
    quantizer on its input, so the first layer also quantizes the image and
    the classifier head quantizes its features. Module names of the wrapped
    network are preserved, which keeps probe/BN lookups shared with the
    teacher.
    """

    def __init__(self, base: nn.Module, weight_bits: int = 4, act_bits: int = 4, act_decay: float = 0.9,
                 dynamic_weight_range: bool = True):
        super().__init__()
        self.base = copy.deepcopy(base)
        self.weight_bits = weight_bits
        self.act_bits = act_bits
        self.frozen_ranges = False
        _swap_layers(self.base, weight_bits, act_bits, act_decay, dynamic_weight_range)
        for attr in ("probe_names", "arch", "num_classes", "width"):
            if hasattr(base, attr):
                setattr(self, attr, getattr(base, attr))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x)

    def quant_layers(self) -> Iterator[tuple[str, _QuantLayerMixin]]:
        for name, m in self.base.named_modules():
            if isinstance(m, QUANT_LAYERS):
                yield name, m

    def named_modules_for_probe(self) -> dict[str, nn.Module]:
        return dict(self.base.named_modules())

    def set_quant_enabled(self, enabled: bool):
        for _, m in self.quant_layers():
            m.quant_enabled = enabled

    def set_range_tracking(self, tracking: bool):
        """Keep updating activation EMA ranges on every forward (unfreezes calibration)."""
        for _, m in self.quant_layers():
            m.act_quant.tracking = tracking
        self.frozen_ranges = not tracking

    def quant_records(self) -> list[dict]:
        records = []
        for name, m in self.quant_layers():
            records.append(m.weight_params.as_record(name, "weight"))
            records.append(m.act_quant.params.as_record(name, "activation"))
        return records

    def load_quant_records(self, records: Iterable[dict]):
        layers = dict(self.quant_layers())
        for r in records:
            if r["layer_id"] not in layers:
                raise QuantizationError(f"unknown quantized layer {r['layer_id']!r}")
            p = compute_params(r["l"], r["u"], r["n"])
            layer = layers[r["layer_id"]]
            if r["kind"] == "weight":
                layer.set_weight_params(p)
            elif r["kind"] == "activation":
                layer.act_quant.set_params(p)
            else:
                raise QuantizationError(f"unknown record kind {r['kind']!r}")


def _swap_layers(module: nn.Module, weight_bits: int, act_bits: int, decay: float, dynamic: bool):
    for name, child in module.named_children():
        if isinstance(child, nn.Conv2d):
            setattr(module, name, QuantConv2d.from_float(child, weight_bits, act_bits, decay, dynamic))
        elif isinstance(child, nn.Linear):
            setattr(module, name, QuantLinear.from_float(child, weight_bits, act_bits, decay, dynamic))
        else:
            _swap_layers(child, weight_bits, act_bits, decay, dynamic)


@torch.no_grad()
def calibrate(model: FakeQuantModel, batches: Iterable[torch.Tensor]) -> FakeQuantModel:
    """Set activation ranges from an EMA over batch min/max and weight ranges from exact min/max.

    Observation runs the float path; the model's train/eval mode is kept.
    Afterwards activation ranges are frozen.
    """
    layers = [m for _, m in model.quant_layers()]
    for m in layers:
        m.act_quant.reset()
        m.act_quant.observing = True
    seen = 0
    try:
        for xb in batches:
            if xb.shape[0] == 0:
                raise QuantizationError("calibration batch is empty")
            model(xb)
            seen += 1
    finally:
        for m in layers:
            m.act_quant.observing = False
    if seen == 0:
        raise QuantizationError("calibration needs at least one batch")
    for m in layers:
        m.capture_weight_range()
    model.frozen_ranges = True
    return model
