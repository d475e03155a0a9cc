import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuronsim.errors import ContractViolation
from neuronsim.numeric import (
    ActivationKind as A,
    Rng,
    activation_derivative,
    apply_activation,
    binomial_draw,
    cross_entropy,
    softmax,
)
from oracles import softmax_by_hand


@pytest.mark.parametrize("kind,x,expected", [
    (A.RELU, -1.0, 0.0),
    (A.RELU, 2.5, 2.5),
    (A.SIGMOID, 0.0, 0.5),
    (A.IDENTITY, -3.25, -3.25),
    (A.TANH, 0.0, 0.0),
])
def test_apply_activation(kind, x, expected):
    assert apply_activation(kind, x) == expected


@pytest.mark.parametrize("kind,out,expected", [
    (A.RELU, 3.0, 1.0),
    (A.RELU, 0.0, 0.0),
    # sigma'(0) = sigma(0) * (1 - sigma(0)) = 0.5 * 0.5
    (A.SIGMOID, 0.5, 0.25),
    (A.TANH, 0.0, 1.0),
    (A.SOFTMAX_OUTPUT, 7.0, 1.0),
])
def test_activation_derivative(kind, out, expected):
    assert activation_derivative(kind, out) == expected


def test_sigmoid_is_stable_for_large_inputs():
    assert apply_activation(A.SIGMOID, -800.0) == 0.0
    assert apply_activation(A.SIGMOID, 800.0) == 1.0


@pytest.mark.parametrize("kind", list(A))
def test_derivative_matches_finite_differences(kind):
    rng = np.random.default_rng(11)
    points = rng.uniform(-4, 4, 400)
    points = points[np.abs(points) > 1e-4][:100]
    h = 1e-6
    for x in points:
        fd = (apply_activation(kind, x + h) - apply_activation(kind, x - h)) / (2 * h)
        an = activation_derivative(kind, apply_activation(kind, x))
        if an == 0.0 and fd == 0.0:
            continue
        assert abs(fd - an) / max(abs(an), 1e-12) < 1e-5, (kind, x)


def test_softmax_examples():
    assert np.allclose(softmax([0.0, 0.0]), [0.5, 0.5], atol=0, rtol=1e-15)
    assert np.allclose(softmax([4.2, 4.2, 4.2]), [1 / 3] * 3, rtol=1e-15)
    expected = softmax_by_hand([1.0, 2.0, 3.0])
    assert np.allclose(expected, [0.09003, 0.24473, 0.66524], atol=5e-6)
    assert np.allclose(softmax([1.0, 2.0, 3.0]), expected, rtol=1e-14)


def test_softmax_rejects_empty():
    with pytest.raises(ContractViolation):
        softmax([])


vectors = st.lists(st.floats(-50, 50), min_size=1, max_size=40)


@given(vectors)
def test_softmax_sums_to_one(v):
    assert abs(softmax(v).sum() - 1.0) <= 1e-9


@given(vectors, st.floats(-100, 100))
def test_softmax_shift_invariance(v, c):
    shifted = softmax(np.asarray(v) + c)
    assert np.max(np.abs(shifted - softmax(v))) <= 1e-12


def test_softmax_preserves_order():
    v = np.array([0.3, -2.0, 5.0, 1.1])
    assert np.array_equal(np.argsort(softmax(v)), np.argsort(v))


def test_cross_entropy_examples():
    target = np.eye(10)[3]
    assert cross_entropy(target, target) == 0.0
    assert math.isclose(cross_entropy(np.full(10, 0.1), target), 2.302585, abs_tol=1e-6)
    pred = np.full(10, 1 / 9)
    pred[3] = 0.0
    assert math.isclose(cross_entropy(pred, target), 27.631021, abs_tol=1e-6)


def test_cross_entropy_length_mismatch():
    with pytest.raises(ContractViolation):
        cross_entropy([0.5, 0.5], [0.0, 0.0, 1.0])


def test_binomial_draw_extremes():
    rng = Rng(5)
    assert all(binomial_draw(rng, 1.0) == 1 for _ in range(1000))
    assert all(binomial_draw(rng, 0.0) == 0 for _ in range(1000))


def test_binomial_draw_mean():
    rng = Rng(2024)
    mean = np.mean([binomial_draw(rng, 0.5) for _ in range(100_000)])
    assert 0.494 <= mean <= 0.506


@pytest.mark.parametrize("p", [-0.1, 1.5])
def test_binomial_draw_rejects_bad_probability(p):
    with pytest.raises(ContractViolation):
        binomial_draw(Rng(0), p)


def test_binomial_draw_advances_once():
    a, b = Rng(9), Rng(9)
    binomial_draw(a, 0.3)
    b.random()
    assert a.random() == b.random()


@settings(max_examples=25)
@given(st.integers(0, 2**64 - 1), st.lists(st.integers(0, 2**32), max_size=3))
def test_rng_reproducible(seed, keys):
    r1, r2 = Rng(seed, *keys), Rng(seed, *keys)
    assert [binomial_draw(r1, 0.37) for _ in range(200)] == [binomial_draw(r2, 0.37) for _ in range(200)]


def test_rng_vector_draws_match_scalar_draws():
    r1, r2 = Rng(3, 1, 4), Rng(3, 1, 4)
    vec = r1.bernoulli(0.6, (7, 5))
    seq = np.array([binomial_draw(r2, 0.6) for _ in range(35)], dtype=float).reshape(7, 5)
    assert np.array_equal(vec, seq)


def test_rng_derive_ignores_parent_state():
    r = Rng(42)
    child_before = r.derive(1, 2).random()
    r.random(1000)
    assert r.derive(1, 2).random() == child_before
    assert Rng(42).derive(1, 3).random() != child_before


def test_rng_seed_range():
    with pytest.raises(ContractViolation):
        Rng(-1)
    with pytest.raises(ContractViolation):
        Rng(2**64)
