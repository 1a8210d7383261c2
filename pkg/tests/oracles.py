"""Independent reference computations used by the tests."""

import numpy as np
import torch


def central_difference(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of scalar ``fn`` at ``x`` by central differences, element by element."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(fn(x))
            flat[i] = orig - h
            down = float(fn(x))
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / max(a.norm(), b.norm(), 1e-30))


def np_quant_params(l, u, n):
    s = (2.0**n - 1) / (u - l)
    return s, s * l + 2.0 ** (n - 1)


def np_quantize(x, l, u, n):
    s, z = np_quant_params(l, u, n)
    q = np.rint(np.clip(x, l, u) * s - z)
    return np.clip(q, -(2 ** (n - 1)), 2 ** (n - 1) - 1)


def np_attention(f):
    a = (f.astype(np.float64) ** 2).sum(axis=(-2, -1))
    return a / np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), 1e-12)


def np_kl(p, q):
    p = np.asarray(p, np.float64)
    q = np.asarray(q, np.float64)
    return (p * (np.log(np.maximum(p, 1e-12)) - np.log(np.maximum(q, 1e-12)))).sum(-1)


def np_softmax(z):
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)
