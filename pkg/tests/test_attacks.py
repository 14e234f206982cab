import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from osad.attacks import (AttackConfig, RoaRect, attack_labels, ce_loss_fn, fgsm, input_gradient, pgd, roa,
                          run_attack)
from osad.errors import ConfigError, NumericError


def linear_loss(w):
    """Per-sample loss <w, x>; its input gradient is w everywhere."""
    def loss(x, y):
        return (x.flatten(1) * w.flatten()).sum(dim=1)
    return loss


def tiny_net(seed=0):
    g = torch.Generator().manual_seed(seed)
    w1 = torch.randn(16, 6, generator=g, dtype=torch.float64)
    w2 = torch.randn(6, 3, generator=g, dtype=torch.float64)
    return lambda x: torch.tanh(x.flatten(1) @ w1) @ w2


def test_fgsm_zero_budget_is_identity():
    x = torch.rand(3, 1, 4, 4)
    out = fgsm(linear_loss(torch.ones(16)), x, torch.zeros(3, dtype=torch.long), AttackConfig("fgsm", epsilon=0.0))
    assert torch.equal(out.pixels, x)


def test_fgsm_linear_example():
    x = torch.tensor([[0.5, 0.5]])
    out = fgsm(linear_loss(torch.tensor([1.0, -2.0])), x, torch.zeros(1, dtype=torch.long),
               AttackConfig("fgsm", epsilon=0.3))
    assert torch.allclose(out.pixels, torch.tensor([[0.8, 0.2]]))


def test_fgsm_matches_finite_difference_sign():
    net = tiny_net()
    loss_fn = ce_loss_fn(net)
    x = torch.rand(2, 1, 4, 4, dtype=torch.float64) * 0.4 + 0.3
    y = torch.tensor([0, 2])
    eps, h = 0.05, 1e-6
    out = fgsm(loss_fn, x, y, AttackConfig("fgsm", epsilon=eps)).pixels
    fd = torch.zeros_like(x)
    for idx in itertools.product(range(2), range(1), range(4), range(4)):
        xp, xm = x.clone(), x.clone()
        xp[idx] += h
        xm[idx] -= h
        fd[idx] = (loss_fn(xp, y)[idx[0]] - loss_fn(xm, y)[idx[0]]) / (2 * h)
    mask = fd.abs() > 1e-4
    assert mask.sum() > 20
    assert torch.allclose((out - x)[mask], eps * fd.sign()[mask], atol=1e-12)


def test_pgd_single_step_equals_fgsm():
    net = tiny_net(1)
    x = torch.rand(4, 1, 4, 4, dtype=torch.float64) * 0.2 + 0.4
    y = torch.tensor([0, 1, 2, 0])
    a = pgd(ce_loss_fn(net), x, y, AttackConfig("pgd", epsilon=0.05, step_size=0.05, iterations=1)).pixels
    b = fgsm(ce_loss_fn(net), x, y, AttackConfig("fgsm", epsilon=0.05)).pixels
    assert torch.equal(a, b)


def test_pgd_linear_hand_simulation():
    # with a constant gradient every coordinate walks monotonically until a bound stops it
    w = torch.tensor([1.0, -1.0, 2.0, 0.0], dtype=torch.float64)
    x = torch.tensor([[0.98, 0.02, 0.5, 0.5]], dtype=torch.float64)
    cfg = AttackConfig("pgd", epsilon=0.3, step_size=0.01, iterations=5)
    out = pgd(linear_loss(w), x, torch.zeros(1, dtype=torch.long), cfg).pixels
    expected = x.clone()
    for _ in range(5):
        expected = expected + 0.01 * w.sign()
        expected = expected.clamp(x - 0.3, x + 0.3).clamp(0, 1)
    assert torch.equal(out, expected)
    assert torch.allclose(out, torch.tensor([[1.0, 0.0, 0.55, 0.5]], dtype=torch.float64))


def test_pgd_bounds_on_random_cases():
    rng = np.random.default_rng(0)
    for case in range(1000):
        eps = float(rng.uniform(0.01, 0.4))
        step = float(rng.uniform(0.001, eps))
        t = int(rng.integers(1, 6))
        w = torch.from_numpy(rng.normal(size=12))
        x = torch.from_numpy(rng.uniform(size=(2, 12)))
        out = pgd(linear_loss(w), x, torch.zeros(2, dtype=torch.long),
                  AttackConfig("pgd", epsilon=eps, step_size=step, iterations=t)).pixels
        assert (out - x).abs().max() <= min(eps, t * step) + 1e-6, case
        assert out.min() >= 0 and out.max() <= 1


def test_pgd_paper_setting_bound():
    net = tiny_net(2)
    x = torch.rand(8, 1, 4, 4, dtype=torch.float64)
    out = pgd(ce_loss_fn(net), x, torch.zeros(8, dtype=torch.long), AttackConfig()).pixels
    assert (out - x).abs().max() <= 0.05 + 1e-9


def test_pgd_step_must_not_exceed_epsilon():
    with pytest.raises(ConfigError):
        AttackConfig("pgd", epsilon=0.01, step_size=0.02)


def brute_force_placement(w, x, fill, h=2, size=8, stride=2):
    best, best_loss = None, -np.inf
    for t in range(0, size - h + 1, stride):
        for l in range(0, size - h + 1, stride):
            xp = x.copy()
            xp[t:t + h, l:l + h] = fill
            val = float((w * xp).sum())
            if val > best_loss:
                best, best_loss = (t, l), val
    return best


def test_roa_placement_matches_enumeration():
    rng = np.random.default_rng(1)
    cfg = AttackConfig("roa", step_size=0.05, roa=RoaRect(2, 2, "grid", inner_steps=0, stride=2))
    for _ in range(50):
        w = rng.normal(size=(8, 8))
        x = rng.uniform(size=(8, 8))
        out = roa(linear_loss(torch.from_numpy(w)), torch.from_numpy(x)[None, None], torch.zeros(1, dtype=torch.long),
                  cfg)
        assert tuple(out.rect[0, :2].tolist()) == brute_force_placement(w, x, 0.5)
        t, l = brute_force_placement(w, x, 0.5)
        assert (out.pixels[0, 0, t:t + 2, l:l + 2] == 0.5).all()


def test_roa_only_touches_rectangle():
    net = tiny_net(3)
    x = torch.rand(3, 1, 4, 4, dtype=torch.float64)
    cfg = AttackConfig("roa", step_size=0.1, roa=RoaRect(2, 2, "gradient_guided", inner_steps=3, candidates=2))
    out = roa(ce_loss_fn(net), x, torch.tensor([0, 1, 2]), cfg)
    for i in range(3):
        t, l, h, w = out.rect[i].tolist()
        outside = torch.ones(4, 4, dtype=torch.bool)
        outside[t:t + h, l:l + w] = False
        assert torch.equal(out.pixels[i, 0][outside], x[i, 0][outside])
    assert out.pixels.min() >= 0 and out.pixels.max() <= 1


def test_roa_rectangle_too_large():
    cfg = AttackConfig("roa", roa=RoaRect(5, 5))
    with pytest.raises(ConfigError):
        roa(linear_loss(torch.ones(16)), torch.rand(1, 1, 4, 4), torch.zeros(1, dtype=torch.long), cfg)


@pytest.mark.parametrize("family", ["fgsm", "pgd", "roa"])
def test_attacks_are_deterministic(family):
    net = tiny_net(4)
    x = torch.rand(3, 1, 4, 4, dtype=torch.float64)
    y = torch.tensor([0, 1, 2])
    cfg = AttackConfig(family, step_size=0.05 if family == "roa" else 0.01, roa=RoaRect(2, 2))
    a = run_attack(ce_loss_fn(net), x, y, cfg).pixels
    b = run_attack(ce_loss_fn(net), x, y, cfg).pixels
    assert torch.equal(a, b)


def test_non_finite_gradient_names_index():
    def loss(x, y):
        return torch.sqrt(x.flatten(1)[:, 0] - 0.5)

    x = torch.tensor([[0.9, 0.0], [0.5, 0.0]])
    with pytest.raises(NumericError, match="index 1"):
        input_gradient(loss, x, torch.zeros(2, dtype=torch.long))


def test_attack_labels_contract():
    logits_fn = lambda x: torch.tensor([[0.0, 0.0, 1.0, 0.0]]).expand(x.shape[0], 4)  # noqa: E731
    x = torch.rand(3, 1, 2, 2)
    labels = torch.tensor([1, 4, 4])
    out, prov = attack_labels(logits_fn, x, labels, torch.tensor([True, False, False]))
    assert out.tolist() == [1, 2, 2]
    assert prov == ["ground_truth", "model_prediction", "model_prediction"]
    known, prov = attack_labels(logits_fn, x, torch.tensor([0, 1, 3]), True)
    assert known.tolist() == [0, 1, 3] and set(prov) == {"ground_truth"}


def test_open_sample_attacked_against_predicted_class():
    # the open sample is predicted as class 2, so FGSM must push away from class 2
    w = torch.zeros(4, 3)
    w[:, 2] = 1.0
    logits_fn = lambda x: x.flatten(1) @ w  # noqa: E731
    x = torch.full((1, 1, 2, 2), 0.5)
    labels, _ = attack_labels(logits_fn, x, torch.tensor([3]), False)
    assert labels.tolist() == [2]
    adv = fgsm(ce_loss_fn(logits_fn), x, labels, AttackConfig("fgsm", epsilon=0.1)).pixels
    assert torch.allclose(adv, torch.full_like(x, 0.4))


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 0.5), st.integers(0, 10_000))
def test_fgsm_stays_in_range_and_ball(eps, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(2, 1, 4, 4, generator=g, dtype=torch.float64)
    w = torch.randn(16, generator=g, dtype=torch.float64)
    out = fgsm(linear_loss(w), x, torch.zeros(2, dtype=torch.long), AttackConfig("fgsm", epsilon=eps)).pixels
    assert (out - x).abs().max() <= eps + 1e-12
    assert out.min() >= 0 and out.max() <= 1


def test_attack_does_not_modify_parameters():
    net = torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(16, 3))
    before = [p.detach().clone() for p in net.parameters()]
    run_attack(ce_loss_fn(net), torch.rand(2, 1, 4, 4), torch.tensor([0, 1]), AttackConfig())
    assert all(torch.equal(a, b) for a, b in zip(before, net.parameters()))
    assert all(p.grad is None for p in net.parameters())
