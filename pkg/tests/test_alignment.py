import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import perturbed_copy
from oracles import np_attention, np_kl
from zsq_forge.alignment import (AlignmentConfig, attention_metric, attention_vector, fa_objective, fa_terms,
                                 feature_term, grad_cosine_similarity, kl_term)
from zsq_forge.refmodels import FeatureTrace, forward_traced


def test_attention_vector_matches_reference():
    f = torch.randn(2, 5, 4, 3, dtype=torch.float64)
    assert np.allclose(attention_vector(f).numpy(), np_attention(f.numpy()))
    raw = attention_vector(f, normalize=False).numpy()
    assert np.allclose(raw, (f.numpy() ** 2).sum(axis=(2, 3)))


def test_attention_metric_is_squared_distance():
    a, b = torch.randn(3, 4, 5, 5, dtype=torch.float64), torch.randn(3, 4, 5, 5, dtype=torch.float64)
    ref = ((np_attention(a.numpy()) - np_attention(b.numpy())) ** 2).sum(-1)
    assert np.allclose(attention_metric(a, b, reduction="none").numpy(), ref)
    assert attention_metric(a, b).item() == pytest.approx(ref.mean())
    assert attention_metric(a, a).item() == 0


def test_attention_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        attention_metric(torch.randn(2, 3, 4, 4), torch.randn(2, 4, 4, 4))


@settings(deadline=None)
@given(st.integers(0, 10_000))
def test_kl_matches_reference_and_is_nonnegative(seed):
    gen = torch.Generator().manual_seed(seed)
    p = torch.softmax(3 * torch.randn(6, 10, generator=gen, dtype=torch.float64), 1)
    q = torch.softmax(3 * torch.randn(6, 10, generator=gen, dtype=torch.float64), 1)
    assert kl_term(p, q).item() == pytest.approx(np_kl(p.numpy(), q.numpy()).mean())
    assert kl_term(p, q).item() >= 0
    assert kl_term(p, p).item() == pytest.approx(0, abs=1e-15)


def test_kl_is_finite_for_zero_probabilities():
    p = torch.tensor([[1.0, 0.0]])
    q = torch.tensor([[0.0, 1.0]])
    assert math.isfinite(kl_term(p, q).item())


def _traces(net, other, x):
    lt, tt, _ = forward_traced(net, x, capture_bn=False)
    ls, ts, _ = forward_traced(other, x, capture_bn=False)
    return tt, ts, torch.softmax(lt, 1), torch.softmax(ls, 1)


def test_alpha_zero_leaves_lambda_times_attention_term(tiny_net):
    other = perturbed_copy(tiny_net, 0.2)
    tt, ts, pt, ps = _traces(tiny_net, other, torch.randn(5, 3, 8, 8, dtype=torch.float64))
    att = np.mean([attention_metric(a, b).item() for a, b in zip(tt.features, ts.features)])
    cfg = AlignmentConfig(lam=3.5, alpha=0.0)
    assert fa_objective(tt, ts, pt, ps, cfg).item() == pytest.approx(3.5 * att, rel=1e-12)


def test_direct_mode_is_mean_squared_feature_error(tiny_net):
    other = perturbed_copy(tiny_net, 0.2)
    tt, ts, _, _ = _traces(tiny_net, other, torch.randn(5, 3, 8, 8, dtype=torch.float64))
    ref = np.mean([((a - b) ** 2).mean().item() for a, b in zip(tt.features, ts.features)])
    assert feature_term(tt, ts, AlignmentConfig(mode="direct")).item() == pytest.approx(ref, rel=1e-12)


def test_identical_networks_have_zero_objective(tiny_net):
    tt, ts, pt, ps = _traces(tiny_net, tiny_net, torch.randn(4, 3, 8, 8, dtype=torch.float64))
    feat, kl = fa_terms(tt, ts, pt, ps, AlignmentConfig())
    assert feat.item() == 0 and abs(kl.item()) < 1e-15


def test_probe_mismatch_rejected():
    a = FeatureTrace([(0, torch.zeros(1, 2, 2, 2)), (1, torch.zeros(1, 2, 2, 2))])
    b = FeatureTrace([(0, torch.zeros(1, 2, 2, 2))])
    with pytest.raises(ValueError):
        feature_term(a, b, AlignmentConfig())
    with pytest.raises(ValueError):
        feature_term(FeatureTrace([]), FeatureTrace([]), AlignmentConfig())


@pytest.mark.parametrize("kwargs", [{"lam": 0.0}, {"alpha": -1.0}, {"mode": "cosine"}])
def test_invalid_config_rejected(kwargs):
    with pytest.raises(ValueError):
        AlignmentConfig(**kwargs)


def test_gradient_cosine_extremes():
    w = torch.randn(5, requires_grad=True)
    loss = (w**2).sum()
    assert grad_cosine_similarity(loss, 2 * loss, [w]) == pytest.approx(1.0)
    assert grad_cosine_similarity(loss, -loss, [w]) == pytest.approx(-1.0)
    assert math.isnan(grad_cosine_similarity(loss, 0 * w.sum(), [w]))
