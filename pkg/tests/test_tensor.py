import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from oracles import central_diff, rel_err

from embshift.errors import DimensionError
from embshift.tensor import (
    AffineLayer,
    affine_backward,
    affine_forward,
    pool_over_embedding,
    pool_over_tokens,
    pooling_backward,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
)

M = np.array([[1.0, 3.0, 5.0], [3.0, 5.0, 7.0]])


def test_pool_over_embedding_examples():
    np.testing.assert_array_equal(pool_over_embedding(M), [2.0, 4.0, 6.0])
    np.testing.assert_array_equal(pool_over_embedding(np.zeros((4, 7))), np.zeros(7))
    np.testing.assert_array_equal(pool_over_embedding([[1.5, -2.0]]), [1.5, -2.0])


def test_pool_over_tokens_examples():
    np.testing.assert_array_equal(pool_over_tokens(M), [3.0, 5.0])
    np.testing.assert_array_equal(pool_over_tokens(np.zeros((4, 7))), np.zeros(4))
    np.testing.assert_array_equal(pool_over_tokens([[1.0], [2.0], [-4.0]]), [1.0, 2.0, -4.0])


@pytest.mark.parametrize("pool", [pool_over_embedding, pool_over_tokens])
def test_pool_empty_is_dimension_error(pool):
    with pytest.raises(DimensionError):
        pool(np.zeros((0, 3)))
    with pytest.raises(DimensionError):
        pool(np.zeros(3))


def test_affine_forward_examples():
    ident = AffineLayer(np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(affine_forward(ident, [3.0, 4.0]), [3.0, 4.0])
    layer = AffineLayer(2.0 * np.eye(2), np.ones(2))
    np.testing.assert_array_equal(affine_forward(layer, [1.0, 1.0]), [3.0, 3.0])
    zero = AffineLayer(np.zeros((3, 2)), np.array([1.0, -2.0, 0.5]))
    np.testing.assert_array_equal(affine_forward(zero, [7.0, -9.0]), [1.0, -2.0, 0.5])
    with pytest.raises(DimensionError):
        affine_forward(ident, [1.0, 2.0, 3.0])


def test_activation_examples():
    assert sigmoid([0.0])[0] == 0.5
    np.testing.assert_array_equal(relu([-1.0, 2.0]), [0.0, 2.0])
    s20 = sigmoid([20.0])[0]
    assert 1 - 1e-6 < s20 < 1.0
    assert s20 == pytest.approx(1.0 / (1.0 + math.exp(-20.0)), abs=0, rel=1e-15)


def test_backward_examples():
    assert sigmoid_backward([0.0], [1.0])[0] == 0.25
    g = 3.7
    assert relu_backward([-1.0], [g])[0] == 0.0
    ident = AffineLayer(np.eye(3), np.zeros(3))
    up = np.array([0.5, -1.0, 2.0])
    dx, _ = affine_backward(ident, np.array([1.0, 2.0, 3.0]), up)
    np.testing.assert_array_equal(dx, up)


def test_backward_shape_errors():
    layer = AffineLayer(np.eye(2), np.zeros(2))
    with pytest.raises(DimensionError):
        affine_backward(layer, np.ones(3), np.ones(2))
    with pytest.raises(DimensionError):
        relu_backward(np.ones(2), np.ones(3))
    with pytest.raises(DimensionError):
        sigmoid_backward(np.ones(2), np.ones(3))
    with pytest.raises(DimensionError):
        pooling_backward(np.ones(4), (2, 3), -2)


def _rand_shape(rng):
    return int(rng.integers(1, 7)), int(rng.integers(1, 7))


def test_finite_difference_all_primitives():
    """Analytic gradients vs central differences on 100 random small shapes per primitive."""
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        n_in, n_out = _rand_shape(rng)
        x = rng.standard_normal(n_in)
        up = rng.standard_normal(n_out)
        w = rng.standard_normal((n_out, n_in))
        b = rng.standard_normal(n_out)

        # affine: inputs and parameters
        def f_aff(p):
            return float(up @ affine_forward(AffineLayer(p["w"], p["b"]), p["x"]))

        params = {"x": x.copy(), "w": w.copy(), "b": b.copy()}
        num = central_diff(f_aff, params)
        dx, (dw, db) = affine_backward(AffineLayer(w, b), x, up)
        worst = max(worst, rel_err(dx, num["x"]), rel_err(dw, num["w"]), rel_err(db, num["b"]))

        # sigmoid
        z = rng.standard_normal(n_out) * 3
        num = central_diff(lambda p: float(up @ sigmoid(p["z"])), {"z": z.copy()})
        worst = max(worst, rel_err(sigmoid_backward(z, up), num["z"]))

        # relu, away from the kink
        z = rng.standard_normal(n_out)
        z[np.abs(z) < 1e-3] += 0.01
        num = central_diff(lambda p: float(up @ relu(p["z"])), {"z": z.copy()})
        worst = max(worst, rel_err(relu_backward(z, up), num["z"]))

        # both poolings
        d, l = _rand_shape(rng)
        m = rng.standard_normal((d, l))
        u_l, u_d = rng.standard_normal(l), rng.standard_normal(d)
        num = central_diff(lambda p: float(u_l @ pool_over_embedding(p["m"])), {"m": m.copy()})
        worst = max(worst, rel_err(pooling_backward(u_l, (d, l), -2), num["m"]))
        num = central_diff(lambda p: float(u_d @ pool_over_tokens(p["m"])), {"m": m.copy()})
        worst = max(worst, rel_err(pooling_backward(u_d, (d, l), -1), num["m"]))
    assert worst < 1e-5


def test_batched_affine_backward_sums_parameter_grads(rng):
    w, b = rng.standard_normal((3, 4)), rng.standard_normal(3)
    x, up = rng.standard_normal((5, 4)), rng.standard_normal((5, 3))
    layer = AffineLayer(w, b)
    dx, (dw, db) = affine_backward(layer, x, up)
    for i in range(5):
        dxi, _ = affine_backward(layer, x[i], up[i])
        np.testing.assert_allclose(dx[i], dxi)
    np.testing.assert_allclose(dw, sum(np.outer(up[i], x[i]) for i in range(5)))
    np.testing.assert_allclose(db, up.sum(axis=0))


finite = st.floats(-1e6, 1e6, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite))
def test_pool_consistency(m):
    assert np.mean(pool_over_embedding(m)) == pytest.approx(np.mean(m), rel=1e-9, abs=1e-6)
    assert np.mean(pool_over_tokens(m)) == pytest.approx(np.mean(m), rel=1e-9, abs=1e-6)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e300, 1e300, allow_nan=False)))
def test_sigmoid_open_interval_and_relu_idempotent(x):
    s = sigmoid(x)
    assert np.all(s > 0.0) and np.all(s < 1.0)
    np.testing.assert_array_equal(relu(relu(x)), relu(x))


def test_pure_bit_identical(rng):
    m = rng.standard_normal((5, 4))
    layer = AffineLayer(rng.standard_normal((2, 4)), rng.standard_normal(2))
    x = rng.standard_normal(4)
    for f in (lambda: pool_over_embedding(m), lambda: pool_over_tokens(m),
              lambda: affine_forward(layer, x), lambda: sigmoid(x), lambda: relu(x)):
        assert f().tobytes() == f().tobytes()
