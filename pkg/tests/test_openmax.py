import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from osad.errors import CalibrationError, ShapeError
from osad.openmax import (OpenMaxModel, belief, fit_evt, fit_weibull, openmax_probs, predict, ranks, recalibrate,
                          softmax)


def model(c=3, d=2, sigma=3, shape=1.0, scale=1.0, mode="cdf"):
    return OpenMaxModel(np.zeros((c, d)), np.full(c, shape), np.full(c, scale), sigma=sigma, belief=mode)


def test_worked_example_c3():
    logits = np.array([[2.0, 1.0, 0.0]])
    w = np.array([[0.5, 1.0, 1.0]])
    out = openmax_probs(logits, np.zeros((1, 2)), model(), weights=w)
    assert np.allclose(out.recalibrated_logits, [[1.0, 1.0, 0.0, 1.0]], atol=0, rtol=0)
    e = math.e
    expected = [e / (3 * e + 1), e / (3 * e + 1), 1 / (3 * e + 1), e / (3 * e + 1)]
    assert np.max(np.abs(out.probs[0] - expected)) < 1e-9


def test_unit_weights_preserve_softmax_ratios():
    rng = np.random.default_rng(0)
    l = rng.normal(size=(50, 5)) * 3
    out = openmax_probs(l, np.zeros((50, 2)), model(c=5), weights=np.ones_like(l))
    assert np.all(out.recalibrated_logits[:, -1] == 0)
    plain = softmax(l, axis=1)
    ratio = out.probs[:, :5] / out.probs[:, :1]
    assert np.max(np.abs(ratio / (plain / plain[:, :1]) - 1)) < 1e-12


def test_zero_weights_open_dominates():
    l = np.array([[2.0, 1.0, 0.5]])
    out = openmax_probs(l, np.zeros((1, 2)), model(), weights=np.zeros_like(l))
    assert np.allclose(out.recalibrated_logits, [[0, 0, 0, 3.5]])
    assert out.probs[0].argmax() == 3


def test_probs_sum_to_one_on_random_inputs():
    rng = np.random.default_rng(1)
    om = OpenMaxModel(rng.normal(size=(4, 3)), rng.uniform(0.5, 3, 4), rng.uniform(0.5, 3, 4), sigma=3)
    l = rng.normal(size=(10_000, 4)) * 10
    v = rng.normal(size=(10_000, 3)) * 3
    p = openmax_probs(l, v, om).probs
    assert p.shape == (10_000, 5)
    assert np.max(np.abs(p.sum(axis=1) - 1)) < 1e-6
    assert np.all(p >= 0)


def test_weibull_mle_recovery():
    draws = stats.weibull_min.rvs(2.0, scale=1.0, size=5000, random_state=np.random.default_rng(1234))
    k, lam = fit_weibull(draws)
    assert 1.8 <= k <= 2.2 and 0.95 <= lam <= 1.05
    # independent numerical optimizer agrees with the profile root
    k_ref, _, lam_ref = stats.weibull_min.fit(draws, floc=0)
    assert k == pytest.approx(k_ref, rel=1e-3) and lam == pytest.approx(lam_ref, rel=1e-3)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.5, 5.0), st.floats(0.1, 10.0), st.integers(0, 2**31 - 1))
def test_weibull_matches_scipy(shape, scale, seed):
    draws = stats.weibull_min.rvs(shape, scale=scale, size=200, random_state=np.random.default_rng(seed))
    k, lam = fit_weibull(draws)
    k_ref, _, lam_ref = stats.weibull_min.fit(draws, floc=0)
    assert k == pytest.approx(k_ref, rel=1e-2) and lam == pytest.approx(lam_ref, rel=1e-2)


def test_degenerate_tail_floors():
    with pytest.warns(RuntimeWarning):
        k, lam = fit_weibull(np.zeros(20))
    assert k > 0 and lam > 0
    with pytest.raises(CalibrationError):
        fit_weibull([1.0])


def test_fit_evt_means_and_errors():
    rng = np.random.default_rng(2)
    a = rng.normal(0, 0.1, size=(100, 2))
    b = rng.normal(0, 0.1, size=(100, 2)) + 1
    feats = np.concatenate([a, b])
    labels = np.repeat([0, 1], 100)
    om = fit_evt(feats, labels, 2, tail_size=20)
    assert np.allclose(om.class_means, [a.mean(0), b.mean(0)], atol=1e-6)
    with pytest.raises(CalibrationError, match="class 1"):
        fit_evt(feats[:110], labels[:110], 2, tail_size=20)


def test_fit_evt_zero_variance_class():
    feats = np.concatenate([np.ones((30, 2)), np.random.default_rng(0).normal(size=(30, 2))])
    labels = np.repeat([0, 1], 30)
    with pytest.warns(RuntimeWarning):
        om = fit_evt(feats, labels, 2, tail_size=10)
    assert np.allclose(om.class_means[0], [1, 1])
    assert om.scales[0] > 0


def test_fit_evt_uses_correct_predictions_only():
    feats = np.array([[0.0], [1.0], [3.0], [100.0]] * 2)
    labels = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    preds = labels.copy()
    preds[3] = 1
    om = fit_evt(feats, labels, 2, tail_size=2, predictions=preds)
    assert om.class_means[0, 0] == pytest.approx(4 / 3)


def test_ranks():
    assert ranks([[2.0, 5.0, 1.0]]).tolist() == [[2, 1, 3]]


def test_belief_rank_cutoff_and_examples():
    l = np.array([[3.0, 2.0, 1.0]])
    v = np.zeros((1, 2))
    lit = model(sigma=3, mode="literal")
    w = belief(v, l, lit)
    # rank 1 at the class mean: 1 - (2/3) * exp(0); rank 3 is never calibrated
    assert w[0, 0] == pytest.approx(1 / 3, abs=1e-15)
    assert w[0, 1] == pytest.approx(1 - 1 / 3, abs=1e-15)
    assert w[0, 2] == 1.0
    assert belief(v, l, model(sigma=1, mode="literal"))[0, 0] == 1.0
    cdf = belief(v, l, model(sigma=3, mode="cdf"))
    assert np.all(cdf == 1.0)


def test_belief_far_from_mean_limits():
    l = np.array([[3.0, 2.0, 1.0]])
    far = np.full((1, 2), 1e6)
    assert np.allclose(belief(far, l, model(mode="literal")), 1.0)
    assert np.allclose(belief(far, l, model(mode="cdf")), [[1 / 3, 2 / 3, 1.0]])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=2, max_size=2),
       st.sampled_from(["cdf", "literal"]))
def test_belief_in_unit_interval(l, v, mode):
    w = belief(np.array([v]), np.array([l]), model(mode=mode))
    assert np.all((w >= 0) & (w <= 1))


def test_shape_errors():
    with pytest.raises(ShapeError):
        belief(np.zeros((1, 2)), np.zeros((1, 4)), model())
    with pytest.raises(ShapeError):
        recalibrate(np.zeros((1, 3)), np.zeros((1, 2)))
    with pytest.raises(CalibrationError):
        OpenMaxModel(np.zeros((1, 2)), [0.0], [1.0])


def test_predict_rules():
    c = 5
    p_open = np.full(c + 1, 0.01)
    p_open[-1] = 0.95
    assert predict(p_open)[0] == c
    confident = np.zeros(c + 1)
    confident[2], confident[-1] = 0.99, 0.001
    assert predict(confident, 0.95)[0] == 2
    tie = np.array([0.4, 0.1, 0.1, 0.4])
    assert predict(tie, 0.3)[0] == 3
    unsure = np.array([0.6, 0.3, 0.05, 0.05])
    assert predict(unsure, 0.95)[0] == 3
    assert predict(unsure, 0.5)[0] == 0


def test_serialization_round_trip(tmp_path):
    om = OpenMaxModel(np.arange(6.0).reshape(3, 2), [1.0, 2.0, 3.0], [0.5, 0.6, 0.7], sigma=2, belief="literal")
    om.save(tmp_path / "om.json", {"config_hash": "abc"})
    back = OpenMaxModel.load(tmp_path / "om.json")
    assert np.array_equal(back.class_means, om.class_means) and back.belief == "literal" and back.sigma == 2


@pytest.mark.parametrize("mode", ["cdf", "literal"])
def test_belief_monotone_in_distance(mode):
    l = np.array([[3.0, 2.0, 1.0]])
    om = model(mode=mode)
    dists = np.linspace(0, 5, 30)
    w = np.array([belief(np.array([[d, 0.0]]), l, om)[0] for d in dists])
    # cdf mode: farther samples lose more of the top logits; literal mode: the opposite
    diffs = np.diff(w[:, 0])
    assert np.all(diffs <= 1e-15) if mode == "cdf" else np.all(diffs >= -1e-15)
