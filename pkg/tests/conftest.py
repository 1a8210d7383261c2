import copy

import pytest
import torch

from zsq_forge.refmodels import build_teacher


def perturbed_copy(model, scale=0.05, seed=1):
    """A copy whose weights differ slightly from ``model``."""
    other = copy.deepcopy(model)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in other.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return other


def randomize_bn(model, seed=0):
    """Give BN layers non-trivial running statistics and affine parameters."""
    gen = torch.Generator().manual_seed(seed)
    for m in model.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.running_mean.copy_(0.3 * torch.randn(m.num_features, generator=gen))
            m.running_var.copy_(0.5 + torch.rand(m.num_features, generator=gen))
            with torch.no_grad():
                m.weight.copy_(0.8 + 0.4 * torch.rand(m.num_features, generator=gen))
                m.bias.copy_(0.1 * torch.randn(m.num_features, generator=gen))
    return model


@pytest.fixture
def tiny_net():
    """A float64 SmallCNN with fewer than 1e4 parameters, in eval mode."""
    torch.manual_seed(0)
    net = randomize_bn(build_teacher("small_cnn", 10, width=4)).double().eval()
    assert sum(p.numel() for p in net.parameters()) <= 10_000
    return net


@pytest.fixture
def small_net():
    torch.manual_seed(0)
    return randomize_bn(build_teacher("small_cnn", 10, width=8)).eval()


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in RESULTS:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
