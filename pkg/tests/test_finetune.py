import math
from dataclasses import replace

import pytest
import torch

from zsq_forge.alignment import AlignmentConfig
from zsq_forge.finetune import (FinetuneConfig, TrainState, baseline_step, cosine_diagnostics, evaluate, finetune,
                                hast_step, make_optimizer, make_student, training_loss)
from zsq_forge.promotion import PromotionConfig
from zsq_forge.refmodels import bn_layers
from zsq_forge.toydata import DivergenceError


@pytest.fixture
def setup(small_net):
    gen = torch.Generator().manual_seed(0)
    x = torch.randn(48, 3, 32, 32, generator=gen)
    y = torch.randint(0, 10, (48,), generator=gen)
    return small_net, x, y


def _cfg(**kw):
    base = dict(epochs=2, lr0=1e-3, batch=16, crop_pad=2, flip=True, alignment=AlignmentConfig(lam=10.0))
    base.update(kw)
    return FinetuneConfig(**base)


def _run(teacher, x, y, cfg):
    student = make_student(teacher, x, 3, 3, batch=16)
    state = finetune(x, y, teacher, student, cfg, test=(x, y))
    return state


def test_epsilon_zero_matches_disabled_promotion_bit_for_bit(setup):
    teacher, x, y = setup
    off = _run(teacher, x, y, _cfg(promotion=PromotionConfig(epsilon=0.0)))
    disabled = _run(teacher, x, y, _cfg(promotion=PromotionConfig(epsilon=0.01, weight_promoted=0.0)))
    assert off.metrics == disabled.metrics
    sa, sb = off.student.state_dict(), disabled.student.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)


def test_epsilon_zero_loss_equals_unpromoted_loss(setup):
    teacher, x, y = setup
    student = make_student(teacher, x, 3, 3, batch=16)
    cfg = _cfg(promotion=PromotionConfig(epsilon=0.0))
    a = training_loss(x[:8], y[:8], student, teacher, cfg)[0]
    b = training_loss(x[:8], y[:8], student, teacher, cfg, promotion=False)[0]
    assert torch.equal(a, b)


def test_finetune_keeps_teacher_and_student_bn_statistics(setup):
    teacher, x, y = setup
    t_before = {k: v.clone() for k, v in teacher.state_dict().items()}
    student = make_student(teacher, x, 3, 3, batch=16)
    bn_before = [(m.running_mean.clone(), m.running_var.clone()) for m in bn_layers(student)]
    w_before = student.base.fc.weight.detach().clone()
    finetune(x, y, teacher, student, _cfg(epochs=1), test=(x, y))
    assert all(torch.equal(v, teacher.state_dict()[k]) for k, v in t_before.items())
    for m, (mu, var) in zip(bn_layers(student), bn_before):
        assert torch.equal(m.running_mean, mu) and torch.equal(m.running_var, var)
    assert not torch.equal(student.base.fc.weight, w_before)


def test_metrics_and_best_state(setup):
    teacher, x, y = setup
    state = _run(teacher, x, y, _cfg(epochs=3))
    assert [m["epoch"] for m in state.metrics] == [0, 1, 2]
    assert set(state.metrics[0]) == {"epoch", "lr", "train_loss", "fa_term", "kl_term", "test_top1"}
    assert state.best_top1 == max(m["test_top1"] for m in state.metrics)
    assert state.best_state is not None
    assert state.final_top1 == state.metrics[-1]["test_top1"]


def test_step_schedule(setup):
    teacher, x, y = setup
    state = _run(teacher, x, y, _cfg(epochs=4, lr_step=2, lr_decay=0.1))
    assert [m["lr"] for m in state.metrics] == pytest.approx([1e-3, 1e-3, 1e-4, 1e-4])


def test_runs_are_reproducible(setup):
    teacher, x, y = setup
    cfg = _cfg(epochs=1, seed=5)
    assert _run(teacher, x, y, cfg).metrics == _run(teacher, x, y, cfg).metrics


def test_optimizer_exempts_vectors_from_weight_decay(small_net):
    student = make_student(small_net, torch.randn(8, 3, 32, 32), 3, 3)
    opt = make_optimizer(student, _cfg())
    decay, no_decay = opt.param_groups
    assert decay["weight_decay"] == 1e-4 and no_decay["weight_decay"] == 0.0
    assert all(p.ndim > 1 for p in decay["params"]) and all(p.ndim <= 1 for p in no_decay["params"])
    assert opt.defaults["nesterov"] and opt.defaults["momentum"] == 0.9


def test_divergence_raises_with_state(setup, monkeypatch):
    teacher, x, y = setup

    def nan_loss(*args, **kwargs):
        z = torch.tensor(float("nan"), requires_grad=True)
        return z, torch.tensor(0.0), torch.tensor(0.0), 0

    monkeypatch.setattr("zsq_forge.finetune.training_loss", nan_loss)
    student = make_student(teacher, x, 3, 3, batch=16)
    with pytest.raises(DivergenceError) as info:
        finetune(x, y, teacher, student, _cfg())
    assert isinstance(info.value.state, TrainState)


def test_step_functions_force_their_objective(setup):
    teacher, x, y = setup
    student = make_student(teacher, x, 3, 3, batch=16)
    cfg = _cfg(promotion=PromotionConfig(epsilon=0.0))
    state = TrainState(student, make_optimizer(student, cfg))
    base = baseline_step((x[:16], y[:16]), state, teacher, cfg)
    hast = hast_step((x[:16], y[:16]), state, teacher, replace(cfg, objective="baseline_CE_KL"))
    assert base.fa_term == 0.0 and hast.fa_term > 0.0
    assert state.iteration == 2


def test_cosine_diagnostics_are_cosines(setup):
    teacher, x, y = setup
    student = make_student(teacher, x, 3, 3, batch=16)
    diag = cosine_diagnostics(x[:16], y[:16], student, teacher, AlignmentConfig())
    assert set(diag) == {"cos_fa_kl", "cos_ce_kl"}
    assert all(-1 <= v <= 1 for v in diag.values() if not math.isnan(v))


def test_diagnostics_logged_every_k_iterations(setup):
    teacher, x, y = setup
    state = _run(teacher, x, y, _cfg(epochs=2, diag_every=2))
    assert [d["iteration"] for d in state.diagnostics] == [0, 2, 4]


def test_unfrozen_activation_ranges_move(setup):
    teacher, x, y = setup
    student = make_student(teacher, x, 3, 3, batch=16)
    before = student.quant_records()
    finetune(3 * x, y, teacher, student, _cfg(epochs=1, freeze_act_ranges=False))
    after = {(r["layer_id"], r["kind"]): r for r in student.quant_records()}
    moved = [r for r in before if r["kind"] == "activation" and after[(r["layer_id"], r["kind"])] != r]
    assert moved


def test_invalid_config_and_empty_data(setup):
    teacher, x, y = setup
    with pytest.raises(ValueError):
        FinetuneConfig(objective="CE")
    with pytest.raises(ValueError):
        FinetuneConfig(epochs=0)
    student = make_student(teacher, x, 3, 3, batch=16)
    with pytest.raises(ValueError):
        finetune(x[:0], y[:0], teacher, student, _cfg())
    with pytest.raises(ValueError):
        evaluate(student, x[:0], y[:0])
