import numpy as np
import pytest
from fd import numeric_grad, rel_error

from endovo import layers
from endovo.errors import ConfigurationError, DimensionError


@pytest.fixture
def rng():
    return np.random.default_rng(7)


# ---------------------------------------------------------------- conv

def test_conv_identity_kernel():
    x = np.ones((1, 3, 3))
    out = layers.conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    assert out.shape == (1, 3, 3)
    assert np.array_equal(out, np.ones((1, 3, 3)))


def test_conv_hand_cross_correlation():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    k = np.array([[[[1.0, 0.0], [0.0, 1.0]]]])
    out = layers.conv2d_forward(x, k, np.zeros(1))
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == 5.0


def test_conv_scalar_chain_rule():
    g = layers.conv2d_backward(np.array([[[3.0]]]), np.array([[[[2.0]]]]), np.array([[[1.0]]]))
    assert g.param_grads["kernels"].item() == 3.0
    assert g.input_grad.item() == 2.0
    assert g.param_grads["bias"].item() == 1.0


def test_conv_zero_out_grad(rng):
    x = rng.standard_normal((2, 5, 5))
    k = rng.standard_normal((3, 2, 3, 3))
    g = layers.conv2d_backward(x, k, np.zeros((3, 3, 3)))
    assert not g.input_grad.any() and not g.param_grads["kernels"].any() and not g.param_grads["bias"].any()


def test_conv_sum_gradient_is_sum_of_overlapped_inputs(rng):
    x = rng.standard_normal((1, 4, 4))
    k = rng.standard_normal((1, 1, 2, 2))
    g = layers.conv2d_backward(x, k, np.ones((1, 3, 3)))
    for i in range(2):
        for j in range(2):
            assert np.isclose(g.param_grads["kernels"][0, 0, i, j], x[0, i:i + 3, j:j + 3].sum())


@pytest.mark.parametrize("stride,pad,ksize", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (1, 2, 5), (2, 0, 1)])
def test_conv_finite_difference(rng, stride, pad, ksize):
    x = rng.standard_normal((2, 2, 5, 5)) if stride == 1 else rng.standard_normal((2, 2, 7, 7))
    k = rng.standard_normal((3, 2, ksize, ksize))
    b = rng.standard_normal(3)
    out = layers.conv2d_forward(x, k, b, stride, pad)
    w = rng.standard_normal(out.shape)

    def f():
        return float((layers.conv2d_forward(x, k, b, stride, pad) * w).sum())

    g = layers.conv2d_backward(x, k, w, stride, pad)
    assert rel_error(g.input_grad.ravel(), numeric_grad(f, x)) < 1e-4
    assert rel_error(g.param_grads["kernels"].ravel(), numeric_grad(f, k)) < 1e-4
    assert rel_error(g.param_grads["bias"], numeric_grad(f, b)) < 1e-4


def test_conv_errors():
    with pytest.raises(DimensionError):
        layers.conv2d_forward(np.ones((2, 4, 4)), np.ones((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ConfigurationError):
        layers.conv2d_forward(np.ones((1, 4, 4)), np.ones((1, 1, 3, 3)), np.zeros(1), stride=2)
    with pytest.raises(DimensionError):
        layers.conv2d_forward(np.ones((1, 2, 2)), np.ones((1, 1, 3, 3)), np.zeros(1))
    with pytest.raises(DimensionError):
        layers.conv2d_backward(np.ones((1, 4, 4)), np.ones((1, 1, 3, 3)), np.ones((1, 3, 3)))


def test_conv_is_pure(rng):
    x = rng.standard_normal((2, 6, 6))
    k = rng.standard_normal((2, 2, 3, 3))
    a = layers.conv2d_forward(x, k, np.zeros(2), 1, 1)
    b = layers.conv2d_forward(x.copy(), k.copy(), np.zeros(2), 1, 1)
    assert np.array_equal(a, b)


# ---------------------------------------------------------------- pooling

def test_maxpool_hand_and_constant():
    out, arg = layers.maxpool_forward(np.array([[[1.0, 2.0], [3.0, 4.0]]]), 2, 2)
    assert out.item() == 4.0 and arg.item() == 3
    out, _ = layers.maxpool_forward(np.full((2, 4, 4), 1.5), 2, 2)
    assert np.all(out == 1.5)


def test_maxpool_ties_lowest_index():
    _, arg = layers.maxpool_forward(np.ones((1, 2, 2)), 2, 2)
    assert arg.item() == 0


def test_maxpool_backward_routes_to_argmax(rng):
    x = rng.permutation(16).astype(float).reshape(1, 4, 4)
    out, arg = layers.maxpool_forward(x, 2, 2)
    dx = layers.maxpool_backward(np.ones_like(out), arg, x.shape)
    assert dx.sum() == 4
    assert np.array_equal(dx[x == layers.maxpool_forward(x, 2, 2)[0].repeat(2, 1).repeat(2, 2)], np.ones(4))


@pytest.mark.parametrize("window,stride,pad", [(2, 2, 0), (3, 1, 1), (3, 2, 1)])
def test_maxpool_finite_difference(rng, window, stride, pad):
    # distinct values keep every window's max unique
    x = rng.permutation(2 * 7 * 7).astype(float).reshape(2, 7, 7) * 0.1
    if (7 + 2 * pad - window) % stride:
        x = x[:, :6, :6].copy()
    out, arg = layers.maxpool_forward(x, window, stride, pad)
    w = rng.standard_normal(out.shape)

    def f():
        return float((layers.maxpool_forward(x, window, stride, pad)[0] * w).sum())

    dx = layers.maxpool_backward(w, arg, x.shape)
    assert rel_error(dx.ravel(), numeric_grad(f, x)) < 1e-4


def test_maxpool_window_too_large():
    with pytest.raises(ConfigurationError):
        layers.maxpool_forward(np.ones((1, 2, 2)), 3, 1)


# ---------------------------------------------------------------- dense

def test_dense_examples():
    x = np.array([1.0, 1.0])
    assert np.array_equal(layers.dense_forward(x, np.array([[1.0, 2.0], [3.0, 4.0]]), np.zeros(2)), [3.0, 7.0])
    assert np.array_equal(layers.dense_forward(np.array([2.0, -1.0]), np.eye(2), np.zeros(2)), [2.0, -1.0])


def test_dense_backward_contract(rng):
    x = rng.standard_normal(4)
    W = rng.standard_normal((3, 4))
    g = rng.standard_normal(3)
    lg = layers.dense_backward(x, W, g)
    assert np.allclose(lg.input_grad, W.T @ g)
    assert np.allclose(lg.param_grads["W"], np.outer(g, x))
    assert np.allclose(lg.param_grads["b"], g)


def test_dense_finite_difference(rng):
    x = rng.standard_normal((5, 4))
    W = rng.standard_normal((3, 4))
    b = rng.standard_normal(3)
    w = rng.standard_normal((5, 3))

    def f():
        return float((layers.dense_forward(x, W, b) * w).sum())

    lg = layers.dense_backward(x, W, w)
    assert rel_error(lg.input_grad.ravel(), numeric_grad(f, x)) < 1e-4
    assert rel_error(lg.param_grads["W"].ravel(), numeric_grad(f, W)) < 1e-4
    assert rel_error(lg.param_grads["b"], numeric_grad(f, b)) < 1e-4


def test_dense_shape_errors():
    with pytest.raises(DimensionError):
        layers.dense_forward(np.ones(3), np.ones((2, 4)), np.zeros(2))
    with pytest.raises(DimensionError):
        layers.dense_backward(np.ones(4), np.ones((2, 4)), np.ones(3))


# ---------------------------------------------------------------- nonlinearities

def test_nonlinearity_values():
    assert layers.nonlinearity(np.array(0.0), "sigmoid") == 0.5
    assert layers.nonlinearity(np.array(0.0), "tanh") == 0.0
    assert np.isclose(layers.nonlinearity(np.array(np.log(3.0)), "sigmoid"), 0.75, rtol=0, atol=1e-15)


def test_sigmoid_extremes_finite():
    y = layers.sigmoid(np.array([-800.0, 800.0]))
    assert np.array_equal(y, [0.0, 1.0])


@pytest.mark.parametrize("kind", ["sigmoid", "tanh"])
def test_nonlinearity_finite_difference(rng, kind):
    x = rng.standard_normal(20) * 2
    w = rng.standard_normal(20)

    def f():
        return float((layers.nonlinearity(x, kind) * w).sum())

    g = layers.nonlinearity_backward(layers.nonlinearity(x, kind), w, kind)
    assert rel_error(g, numeric_grad(f, x)) < 1e-6


def test_unknown_nonlinearity():
    with pytest.raises(ConfigurationError):
        layers.nonlinearity(np.zeros(2), "gelu")


# ---------------------------------------------------------------- concat / split

def test_concat_preserves_values():
    a = np.arange(4.0).reshape(1, 2, 2)
    b = np.arange(8.0).reshape(2, 2, 2) + 10
    c = layers.channel_concat([a, b])
    assert c.shape == (3, 2, 2)
    assert np.array_equal(c[0], a[0]) and np.array_equal(c[1:], b)
    assert np.array_equal(layers.channel_concat([a]), a)


def test_concat_split_round_trip(rng):
    parts = [rng.standard_normal((2, c, 3, 3)) for c in (1, 4, 2)]
    back = layers.channel_split(layers.channel_concat(parts), [1, 4, 2])
    for p, q in zip(parts, back):
        assert np.array_equal(p, q)


def test_concat_spatial_mismatch():
    with pytest.raises(DimensionError):
        layers.channel_concat([np.ones((1, 2, 2)), np.ones((1, 3, 2))])


# ---------------------------------------------------------------- dropout

def test_dropout_identities(rng):
    x = rng.standard_normal((3, 4))
    y, _ = layers.dropout(x, 0.0, 1, "train")
    assert np.array_equal(y, x)
    y, _ = layers.dropout(x, 0.9, 1, "eval")
    assert np.array_equal(y, x)


def test_dropout_seeded_and_backward(rng):
    x = rng.standard_normal(100)
    y1, m1 = layers.dropout(x, 0.3, 5)
    y2, m2 = layers.dropout(x, 0.3, 5)
    assert np.array_equal(y1, y2)
    assert np.array_equal(layers.dropout_backward(np.ones(100), m1), m1)
    assert set(np.unique(m1)) <= {0.0, 1 / 0.7}


def test_dropout_expectation_monte_carlo():
    x = np.array([1.0, -2.0, 0.5])
    gen = np.random.default_rng(123)
    reps = 10_000
    ys = np.stack([layers.dropout(x, 0.5, gen)[0] for _ in range(reps)])
    # each output is x * 2 * Bernoulli(0.5): std |x| per draw
    sigma = np.abs(x) / np.sqrt(reps)
    assert np.all(np.abs(ys.mean(axis=0) - x) < 3 * sigma)


def test_dropout_rate_validation():
    with pytest.raises(ConfigurationError):
        layers.dropout(np.ones(2), 1.0)
