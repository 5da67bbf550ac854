import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import numerical_gradient, rel_error
from patchdesc import layers
from patchdesc.errors import DegenerateBatchError, DimensionError, InvalidCacheError
from patchdesc.layers import BatchNormParams, ConvParams

TOL = 1e-4


def conv_reference(x, w, b, s, p):
    """Direct six-loop cross-correlation."""
    B, C, H, W = x.shape
    N, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    Ho = (H + 2 * p - k) // s + 1
    Wo = (W + 2 * p - k) // s + 1
    y = np.zeros((B, N, Ho, Wo))
    for bi in range(B):
        for n in range(N):
            for oy in range(Ho):
                for ox in range(Wo):
                    acc = b[n]
                    for c in range(C):
                        for i in range(k):
                            acc += np.dot(w[n, c, i], xp[bi, c, oy * s + i, ox * s:ox * s + k])
                    y[bi, n, oy, ox] = acc
    return y


def maxpool_reference(x, k):
    B, C, H, W = x.shape
    Ho, Wo = (H - k) // k + 1, (W - k) // k + 1
    y = np.empty((B, C, Ho, Wo), dtype=x.dtype)
    for oy in range(Ho):
        for ox in range(Wo):
            y[:, :, oy, ox] = x[:, :, oy * k:oy * k + k, ox * k:ox * k + k].max(axis=(2, 3))
    return y


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-5)])
@pytest.mark.parametrize("k,s,p", [(3, 1, 1), (5, 1, 2), (3, 2, 0), (1, 1, 0)])
def test_conv_matches_six_loop_reference(rng, dtype, tol, k, s, p):
    x = rng.standard_normal((2, 3, 9, 8)).astype(dtype)
    w = rng.standard_normal((4, 3, k, k)).astype(dtype)
    b = rng.standard_normal(4).astype(dtype)
    y, _ = layers.conv_forward(x, ConvParams(w, b, s, p))
    ref = conv_reference(x.astype(np.float64), w.astype(np.float64), b.astype(np.float64), s, p)
    assert rel_error(y, ref) <= tol


@pytest.mark.parametrize("k,s,p", [(3, 1, 1), (3, 2, 1), (2, 2, 0)])
def test_conv_gradients(f64, rng, k, s, p):
    x = rng.standard_normal((2, 2, 6, 7))
    params = ConvParams(rng.standard_normal((3, 2, k, k)), rng.standard_normal(3), s, p)
    y, cache = layers.conv_forward(x, params)
    g = rng.standard_normal(y.shape)
    dx, dw, db = layers.conv_backward(g, cache, params)

    def f():
        return np.sum(layers.conv_forward(x, params)[0] * g)

    assert rel_error(dx, numerical_gradient(f, x)) <= TOL
    assert rel_error(dw, numerical_gradient(f, params.weights)) <= TOL
    assert rel_error(db, numerical_gradient(f, params.bias)) <= TOL


def test_conv_rejects_channel_mismatch(rng):
    params = ConvParams(rng.standard_normal((3, 2, 3, 3)), np.zeros(3))
    with pytest.raises(DimensionError):
        layers.conv_forward(rng.standard_normal((1, 4, 5, 5)), params)


def test_relu_gradient_away_from_kink(f64, rng):
    x = rng.standard_normal((3, 2, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5  # central differences are meaningless at the kink
    y, cache = layers.relu_forward(x)
    g = rng.standard_normal(y.shape)
    dx = layers.relu_backward(g, cache)
    assert rel_error(dx, numerical_gradient(lambda: np.sum(layers.relu_forward(x)[0] * g), x)) <= TOL
    np.testing.assert_array_equal(y, np.maximum(x, 0))


def _bn(rng, C):
    return BatchNormParams(1 + 0.1 * rng.standard_normal(C), 0.1 * rng.standard_normal(C), np.zeros(C), np.ones(C))


def test_batchnorm_gradients(f64, rng):
    x = 2 + 3 * rng.standard_normal((4, 3, 3, 3))
    p = _bn(rng, 3)
    y, cache = layers.batchnorm_forward(x, p)
    g = rng.standard_normal(y.shape)
    dx, dgamma, dbeta = layers.batchnorm_backward(g, cache, p)

    def f():
        return np.sum(layers.batchnorm_forward(x, p)[0] * g)

    assert rel_error(dx, numerical_gradient(f, x)) <= TOL
    assert rel_error(dgamma, numerical_gradient(f, p.gamma)) <= TOL
    assert rel_error(dbeta, numerical_gradient(f, p.beta)) <= TOL


def test_batchnorm_statistics(f64, rng):
    x = 5 + 2 * rng.standard_normal((8, 2, 4, 4))
    p = BatchNormParams(np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), momentum=0.9)
    y, _ = layers.batchnorm_forward(x, p)
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, rtol=1e-4)
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))  # biased, as used for normalisation
    np.testing.assert_allclose(p.running_mean, 0.1 * mean, rtol=1e-12)
    np.testing.assert_allclose(p.running_var, 0.9 + 0.1 * var, rtol=1e-12)


def test_batchnorm_eval_uses_running_stats(f64, rng):
    x = rng.standard_normal((2, 2, 3, 3))
    p = BatchNormParams(np.array([2.0, 1.0]), np.array([0.5, -1.0]), np.array([1.0, -1.0]), np.array([4.0, 0.25]))
    before = (p.running_mean.copy(), p.running_var.copy())
    y, cache = layers.batchnorm_forward(x, p, train=False)
    expected = (x - p.running_mean[None, :, None, None]) / np.sqrt(p.running_var + p.epsilon)[None, :, None, None]
    expected = expected * p.gamma[None, :, None, None] + p.beta[None, :, None, None]
    np.testing.assert_allclose(y, expected, rtol=1e-12)
    np.testing.assert_array_equal(p.running_mean, before[0])
    with pytest.raises(InvalidCacheError):
        layers.batchnorm_backward(y, cache, p)
    # eval output of one sample does not depend on the rest of the batch
    y1, _ = layers.batchnorm_forward(x[:1], p, train=False)
    np.testing.assert_array_equal(y1, y[:1])


def test_batchnorm_degenerate_batch(rng):
    p = _bn(rng, 2)
    with pytest.raises(DegenerateBatchError):
        layers.batchnorm_forward(rng.standard_normal((1, 2, 1, 1)), p)


@pytest.mark.parametrize("k", [2, 3])
def test_maxpool_matches_window_scan(rng, k):
    x = rng.standard_normal((2, 3, 16, 17)).astype(np.float32)
    y, _ = layers.maxpool_forward(x, k)
    np.testing.assert_array_equal(y, maxpool_reference(x, k))


def test_maxpool_floor_rounding_and_ties():
    y, cache = layers.maxpool_forward(np.ones((1, 1, 16, 16)), 3)
    assert y.shape == (1, 1, 5, 5)
    dx = layers.maxpool_backward(np.ones_like(y), cache)
    # ties route to the first element of each window; the uncovered last row/column get nothing
    assert dx.sum() == 25 and dx[0, 0, 0, 0] == 1 and dx[0, 0, 0, 1] == 0 and dx[0, 0, 15].sum() == 0


def test_maxpool_gradient(f64, rng):
    # distinct values far apart relative to the finite-difference step
    x = rng.permutation(2 * 2 * 6 * 6).reshape(2, 2, 6, 6) * 0.01
    y, cache = layers.maxpool_forward(x, 2)
    g = rng.standard_normal(y.shape)
    dx = layers.maxpool_backward(g, cache)
    assert rel_error(dx, numerical_gradient(lambda: np.sum(layers.maxpool_forward(x, 2)[0] * g), x)) <= TOL


def test_fc_gradients(f64, rng):
    x = rng.standard_normal((3, 2, 2, 2))
    w = rng.standard_normal((8, 5))
    b = rng.standard_normal(5)
    y, cache = layers.fc_forward(x, w, b)
    np.testing.assert_allclose(y, x.reshape(3, -1) @ w + b)
    g = rng.standard_normal(y.shape)
    dx, dw, db = layers.fc_backward(g, cache, w)
    assert dx.shape == x.shape

    def f():
        return np.sum(layers.fc_forward(x, w, b)[0] * g)

    for analytic, wrt in ((dx, x), (dw, w), (db, b)):
        assert rel_error(analytic, numerical_gradient(f, wrt)) <= TOL


def test_l2norm_gradient_and_norm(f64, rng):
    x = rng.standard_normal((4, 6))
    y, cache = layers.l2norm_forward(x)
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1, atol=1e-12)
    g = rng.standard_normal(y.shape)
    dx = layers.l2norm_backward(g, cache)
    assert rel_error(dx, numerical_gradient(lambda: np.sum(layers.l2norm_forward(x)[0] * g), x)) <= TOL
    # the gradient is orthogonal to the output direction
    np.testing.assert_allclose(np.sum(dx * x, axis=1), 0, atol=1e-12)


def test_l2norm_zero_row_is_finite():
    y, cache = layers.l2norm_forward(np.zeros((1, 3)))
    assert np.all(np.isfinite(y)) and np.all(np.isfinite(layers.l2norm_backward(np.ones((1, 3)), cache)))


def test_gap_gradient(f64, rng):
    x = rng.standard_normal((2, 3, 5, 5))
    y, cache = layers.global_avgpool_forward(x)
    g = rng.standard_normal(y.shape)
    dx = layers.global_avgpool_backward(g, cache)
    assert rel_error(dx, numerical_gradient(lambda: np.sum(layers.global_avgpool_forward(x)[0] * g), x)) <= TOL


def test_backward_checks_cache_and_shape(rng):
    _, relu_cache = layers.relu_forward(np.ones((1, 2)))
    with pytest.raises(InvalidCacheError):
        layers.l2norm_backward(np.ones((1, 2)), relu_cache)
    with pytest.raises(InvalidCacheError):
        layers.relu_backward(np.ones((1, 2)), None)
    with pytest.raises(DimensionError):
        layers.relu_backward(np.ones((2, 2)), relu_cache)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**16), st.floats(0.1, 10))
def test_relu_positive_homogeneity(seed, a):
    x = np.random.default_rng(seed).standard_normal((2, 3))
    np.testing.assert_allclose(layers.relu_forward(a * x)[0], a * layers.relu_forward(x)[0], rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**16), st.floats(0.01, 100), st.floats(-50, 50))
def test_batchnorm_train_output_invariant_to_affine_input(seed, a, c):
    r = np.random.default_rng(seed)
    x = r.standard_normal((4, 2, 2, 2))
    p = BatchNormParams(np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), epsilon=0.0)
    y1, _ = layers.batchnorm_forward(x, p)
    y2, _ = layers.batchnorm_forward(a * x + c, p)
    np.testing.assert_allclose(y1, y2, atol=1e-8)
