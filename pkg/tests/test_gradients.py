"""Analytic input gradients versus central finite differences in double precision."""

import pytest
import torch

from conftest import perturbed_copy
from oracles import central_difference, relative_error
from zsq_forge.alignment import AlignmentConfig, fa_objective
from zsq_forge.quantizer import FakeQuantModel
from zsq_forge.refmodels import forward_traced
from zsq_forge.synthesis import bns_loss, hil_loss, il_loss

TOL = 1e-4


def _inputs(seed=0):
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(4, 3, 8, 8, generator=gen, dtype=torch.float64)
    y = torch.tensor([0, 3, 7, 3])
    return x, y


def _check(fn, x):
    xg = x.clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(fn(xg), xg)
    numeric = central_difference(fn, x)
    assert analytic.norm() > 0
    err = relative_error(analytic, numeric)
    assert err < TOL, err
    return err


def test_bns_gradient(tiny_net):
    x, _ = _inputs()
    _check(lambda v: bns_loss(forward_traced(tiny_net, v, capture_features=False)[2]), x)


def test_il_gradient(tiny_net):
    x, y = _inputs(1)
    _check(lambda v: il_loss(tiny_net(v), y), x)


@pytest.mark.parametrize("gamma", [0.5, 2.0])
def test_hil_gradient(tiny_net, gamma):
    x, y = _inputs(2)
    _check(lambda v: hil_loss(tiny_net(v), y, gamma), x)


def _float_student(teacher):
    """Fake-quant wrapper with quantization switched off; rounding has no usable finite differences."""
    student = FakeQuantModel(perturbed_copy(teacher, 0.1), 4, 4)
    student.set_quant_enabled(False)
    for _, m in student.quant_layers():
        m.act_quant.enabled = False
    return student.double().eval()


@pytest.mark.parametrize("mode", ["relaxed", "direct"])
def test_fa_objective_gradient(tiny_net, mode):
    student = _float_student(tiny_net)
    cfg = AlignmentConfig(lam=1.0, alpha=1.0, mode=mode)
    x, _ = _inputs(3)

    def fa(v):
        lt, tt, _ = forward_traced(tiny_net, v, capture_bn=False)
        ls, ts, _ = forward_traced(student, v, capture_bn=False)
        return fa_objective(tt, ts, torch.softmax(lt, 1), torch.softmax(ls, 1), cfg)

    _check(fa, x)


def test_detached_weight_gives_weighted_ce_gradient(tiny_net):
    x, y = _inputs(4)
    xa = x.clone().requires_grad_(True)
    (g_detached,) = torch.autograd.grad(hil_loss(tiny_net(xa), y, 2.0, detach_weight=True), xa)
    with torch.no_grad():
        w = (1 - torch.softmax(tiny_net(x), 1).gather(1, y.view(-1, 1)).squeeze(1)) ** 2
    xb = x.clone().requires_grad_(True)
    ce = torch.nn.functional.cross_entropy(tiny_net(xb), y, reduction="none")
    (g_ref,) = torch.autograd.grad((w * ce).mean(), xb)
    assert torch.allclose(g_detached, g_ref, rtol=1e-10, atol=1e-14)
