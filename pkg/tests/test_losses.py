import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from liser import tensor as T
from liser.losses import (LossWeights, aggregate_teacher_segments, batch_loss, ce_loss,
                          conf_batch_loss, confidence_weight, distill_ce_loss, mae_loss)
from conftest import check_grads

finite = st.floats(-20, 20, allow_nan=False)
terms = lambda lo, hi: st.lists(st.floats(0, 10, allow_nan=False), min_size=lo, max_size=hi)  # noqa: E731


def direct_ce(z, y):
    m = max(z)
    return -(z[y] - m - math.log(sum(math.exp(v - m) for v in z)))


# ------------------------------------------------------------------- ce_loss

def test_ce_uniform():
    assert abs(ce_loss(np.zeros(8), 3) - math.log(8)) < 1e-15


def test_ce_large_margin():
    z = np.zeros(5)
    z[2] = 100.0
    assert 0 <= ce_loss(z, 2) < 1e-40


def test_ce_against_direct(rng):
    for _ in range(20):
        z = rng.normal(scale=3, size=6)
        y = int(rng.integers(6))
        assert abs(ce_loss(z, y) - direct_ce(z.tolist(), y)) < 1e-12


def test_ce_batched_and_range(rng):
    z = rng.normal(size=(4, 3))
    y = np.array([0, 2, 1, 1])
    np.testing.assert_allclose(ce_loss(z, y), [ce_loss(z[i], y[i]) for i in range(4)], rtol=1e-15)
    with pytest.raises(ValueError):
        ce_loss(z[0], 3)


# ------------------------------------------------------------------ mae_loss

def test_mae_cases(rng):
    assert mae_loss(np.array([0.3, 0.7]), np.array([0.3, 0.7])) == 0
    assert mae_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 1.0
    p, q = rng.dirichlet(np.ones(7)), rng.dirichlet(np.ones(7))
    assert abs(mae_loss(p, q) - sum(abs(a - b) for a, b in zip(p, q)) / 7) < 1e-15
    with pytest.raises(ValueError):
        mae_loss(np.ones(3) / 3, np.ones(4) / 4)


# --------------------------------------------------------- distill_ce_loss

def test_distill_ce_uniform():
    assert abs(distill_ce_loss(np.zeros(7), np.ones(7) / 7) - math.log(7)) < 1e-15


def test_distill_ce_against_direct(rng):
    z, q = rng.normal(size=5), rng.dirichlet(np.ones(5))
    ref = sum(qk * direct_ce(z.tolist(), k) for k, qk in enumerate(q))
    assert abs(distill_ce_loss(z, q) - ref) < 1e-12


# ------------------------------------------------------- teacher aggregation

def test_aggregate_and_confidence(rng):
    d = rng.dirichlet(np.ones(4))
    np.testing.assert_array_equal(aggregate_teacher_segments([d]), d)
    np.testing.assert_array_equal(aggregate_teacher_segments([[1, 0], [0, 1]]), [0.5, 0.5])
    six = rng.dirichlet(np.ones(4), size=6)
    ref = [sum(six[i, k] for i in range(6)) / 6 for k in range(4)]
    np.testing.assert_allclose(aggregate_teacher_segments(six), ref, rtol=1e-15)
    with pytest.raises(ValueError):
        aggregate_teacher_segments(np.zeros((0, 3)))
    assert confidence_weight([0.7, 0.2, 0.1]) == 0.7
    assert confidence_weight(np.ones(8) / 8) == 1 / 8
    assert confidence_weight([0.0, 1.0, 0.0]) == 1.0


# ------------------------------------------------------------- batch losses

def test_batch_loss_hand_cases():
    assert abs(batch_loss([1.0], [0.2], [0.4], LossWeights(1, 1)) - 0.8) < 1e-15
    assert abs(batch_loss([1.0], [0.2], [0.4], LossWeights(5, 1)) - 1.2) < 1e-15
    assert abs(conf_batch_loss([1.0], [0.2], [0.4], LossWeights(1, 1), [[0.5, 0.25]]) - 0.6) < 1e-15


def test_zero_instance_weights_keep_denominator():
    w = LossWeights(2, 3)
    assert conf_batch_loss([1.0, 2.0], [0.5], [0.5], w, [[0, 0]]) == batch_loss([1.0, 2.0], [0.0], [0.0], w)


def test_batch_loss_errors():
    with pytest.raises(ValueError):
        batch_loss([], [], [], LossWeights())
    with pytest.raises(ValueError):
        batch_loss([1.0], [0.1, 0.2], [0.1], LossWeights())
    with pytest.raises(ValueError):
        conf_batch_loss([1.0], [0.1], [0.1], LossWeights(), [[1, 1], [1, 1]])
    with pytest.raises(ValueError):
        LossWeights(-1.0, 1.0)


@settings(max_examples=200, deadline=None)
@given(terms(0, 12), st.integers(0, 12), st.floats(0, 10), st.floats(0, 10), st.randoms(use_true_random=False))
def test_unit_weights_equal_plain_loss(sup, n_u, lsd, lvd, r):
    if not sup and not n_u:
        sup = [1.0]
    sd = [r.uniform(0, 2) for _ in range(n_u)]
    vd = [r.uniform(0, 2) for _ in range(n_u)]
    w = LossWeights(lsd, lvd)
    assert conf_batch_loss(sup, sd, vd, w, np.ones((n_u, 2))) == batch_loss(sup, sd, vd, w)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 25).flatmap(lambda n: arrays(np.float64, (n, 6), elements=finite)), st.data())
def test_no_unlabeled_is_mean_ce(logits, data):
    y = np.array(data.draw(st.lists(st.integers(0, 5), min_size=len(logits), max_size=len(logits))))
    ce = ce_loss(logits, y)
    assert batch_loss(ce, [], [], LossWeights(3.0, 0.5)) == np.mean(ce)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(2, 9), elements=finite), st.data())
def test_one_hot_distill_ce_is_ce(z, data):
    k = int(data.draw(st.integers(0, len(z) - 1)))
    q = np.zeros(len(z))
    q[k] = 1.0
    assert distill_ce_loss(z, q) == ce_loss(z, k)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-5, 5)), st.data())
def test_mae_properties(z, data):
    q = np.asarray(data.draw(arrays(np.float64, 5, elements=st.floats(0.01, 1))))
    q = q / q.sum()
    p = T.softmax(z).data
    v = mae_loss(p, q)
    assert 0 <= v <= 2 / 5 + 1e-12
    assert v == mae_loss(q, p)


# ---------------------------------------------------------------- gradients

def test_loss_gradients(rng):
    z = rng.normal(size=(3, 4))
    q = rng.dirichlet(np.ones(4), size=3)
    y = np.array([1, 0, 3])
    check_grads(lambda z: T.tsum(ce_loss(z, y)), [z])
    check_grads(lambda z: T.tsum(distill_ce_loss(z, q)), [z])
    check_grads(lambda z: T.tsum(mae_loss(T.softmax(z), q)), [z])
    w = LossWeights(0.5, 5.0)
    iw = rng.uniform(size=(2, 2))
    check_grads(lambda a, b, c: conf_batch_loss(a, b, c, w, iw),
                [rng.uniform(size=3), rng.uniform(size=2), rng.uniform(size=2)])


def test_tensor_inputs_stay_tensors():
    out = batch_loss(T.Tensor(np.array([1.0]), requires_grad=True), [], [], LossWeights())
    assert isinstance(out, T.Tensor)
    assert isinstance(ce_loss(np.zeros(3), 0), float)
