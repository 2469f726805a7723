"""Forward oracles and gradient checks for the dense-network kernel."""

import math

import numpy as np
import pytest

from fusilade.nn_core import (BCE_EPS, Dense, MultiHeadCrossAttention, Relu,
                              ShapeError, Sigmoid, SoftmaxRows, StateError,
                              activation_forward, bce_grad, bce_loss,
                              max_rel_error, numeric_gradient,
                              scaled_dot_attention, sigmoid, softmax_rows)


def make_dense(w, b):
    w = np.asarray(w, dtype=np.float64)
    layer = Dense(w.shape[0], w.shape[1])
    layer.w[...] = w
    layer.b[...] = b
    return layer


class TestDenseForward:
    def test_identity_weights(self):
        layer = make_dense([[1, 0], [0, 1]], [0, 0])
        assert np.array_equal(layer.forward([[1, 2]]), [[1, 2]])

    def test_sum_plus_bias(self):
        layer = make_dense([[1], [1]], [3])
        assert np.array_equal(layer.forward([[1, 2]]), [[6]])

    def test_hand_matrix_multiply(self):
        layer = make_dense([[0.5, 1], [1, 0.5]], [0.1, -0.1])
        np.testing.assert_allclose(layer.forward([[2, -1]]), [[0.1, 1.4]], atol=1e-15)

    def test_dimension_mismatch_names_both_shapes(self):
        layer = make_dense([[1.0], [1.0]], [0.0])
        with pytest.raises(ShapeError, match=r"\(1, 3\).*\(2, 1\)"):
            layer.forward([[1, 2, 3]])

    def test_backward_before_forward_is_state_error(self):
        layer = make_dense([[1.0], [1.0]], [0.0])
        with pytest.raises(StateError):
            layer.backward([[1.0]])


class TestActivations:
    def test_relu(self):
        assert np.array_equal(activation_forward([[-1, 0, 2]], "relu"), [[0, 0, 2]])

    def test_sigmoid_zero(self):
        assert activation_forward([[0.0]], "sigmoid")[0, 0] == 0.5

    def test_sigmoid_extreme_inputs_stay_finite(self):
        out = sigmoid(np.array([-1e4, 1e4]))
        assert np.all(np.isfinite(out))
        assert out[0] == 0.0 and out[1] == 1.0

    def test_softmax_symmetry(self):
        np.testing.assert_allclose(activation_forward([[0, 0]], "softmax_rows"),
                                   [[0.5, 0.5]])

    def test_softmax_rows_sum_to_one_and_positive(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            x = rng.normal(scale=50.0, size=(rng.integers(1, 6), rng.integers(1, 6)))
            y = softmax_rows(x)
            np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
            assert np.all(y > 0.0)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            activation_forward([[1.0]], "tanh")


class TestAttentionForward:
    def test_identical_keys_give_uniform_mean(self):
        out, weights = scaled_dot_attention([[1.0]], [[0.0], [0.0]], [[2.0], [4.0]])
        np.testing.assert_allclose(weights, [[0.5, 0.5]])
        np.testing.assert_allclose(out, [[3.0]])

    def test_hand_computed_softmax_weights(self):
        out, weights = scaled_dot_attention([[1.0]], [[0.0], [math.log(3.0)]],
                                            [[0.0], [4.0]])
        np.testing.assert_allclose(weights, [[0.25, 0.75]], atol=1e-15)
        np.testing.assert_allclose(out, [[3.0]], atol=1e-14)

    def test_equal_scores_give_uniform_rows(self):
        rng = np.random.default_rng(1)
        n = 7
        q = rng.normal(size=(3, 2))
        k = np.tile(rng.normal(size=(1, 2)), (n, 1))  # identical keys
        v = rng.normal(size=(n, 2))
        _, weights = scaled_dot_attention(q, k, v)
        np.testing.assert_allclose(weights, np.full((3, n), 1.0 / n), atol=1e-15)

    def test_zero_length_context_errors(self):
        with pytest.raises(ShapeError, match="no keys"):
            scaled_dot_attention([[1.0]], np.empty((0, 1)), np.empty((0, 1)))
        att = MultiHeadCrossAttention(2, 2, 1, 2, np.random.default_rng(0))
        with pytest.raises(ShapeError, match="no keys"):
            att.forward(np.ones((1, 2)), np.empty((0, 2)))

    def test_multihead_identical_context_rows_collapse_to_value_projection(self):
        rng = np.random.default_rng(2)
        att = MultiHeadCrossAttention(4, 4, 2, 2, rng)
        row = rng.normal(size=(1, 4))
        ctx = np.tile(row, (6, 1))
        out = att.forward(rng.normal(size=(1, 4)), ctx)
        np.testing.assert_allclose(att.last_weights, 1.0 / 6, atol=1e-15)
        expected = att.w_output.forward(att.w_value.forward(row))
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_forward_is_pure(self):
        rng = np.random.default_rng(3)
        att = MultiHeadCrossAttention(3, 2, 1, 3, rng)
        q = rng.normal(size=(2, 3))
        ctx = rng.normal(size=(4, 2))
        a = att.forward(q, ctx)
        b = att.forward(q, ctx)
        assert np.array_equal(a, b)

    def test_single_query_batch_matches_per_sample_forward(self):
        rng = np.random.default_rng(30)
        att = MultiHeadCrossAttention(5, 4, 2, 3, rng)
        queries = rng.normal(size=(6, 5))
        contexts = rng.normal(size=(6, 7, 4))
        batched = att.forward_single_query_batch(queries, contexts)
        att.reset()
        for i in range(6):
            single = att.forward(queries[i:i + 1], contexts[i])
            np.testing.assert_allclose(batched[i], single[0], atol=1e-12)
            np.testing.assert_allclose(att.last_weights.sum(axis=-1), 1.0, atol=1e-12)
            att.reset()

    def test_single_query_batch_gradients(self):
        rng = np.random.default_rng(31)
        att = MultiHeadCrossAttention(4, 3, 2, 2, rng)
        queries = rng.normal(size=(3, 4))
        contexts = rng.normal(size=(3, 5, 3))
        proj = rng.normal(size=(3, 4))
        att.forward_single_query_batch(queries, contexts)
        att.zero_grad()
        gq, gctx = att.backward_single_query_batch(proj)

        def loss():
            val = float(np.sum(att.forward_single_query_batch(queries, contexts) * proj))
            att.reset()
            return val

        assert max_rel_error(gq, numeric_gradient(loss, queries)) < 1e-6
        assert max_rel_error(gctx, numeric_gradient(loss, contexts)) < 1e-6
        for value, grad in att.params():
            assert max_rel_error(grad, numeric_gradient(loss, value)) < 1e-6

    def test_backward_cache_kind_mismatch_is_state_error(self):
        rng = np.random.default_rng(32)
        att = MultiHeadCrossAttention(2, 2, 1, 2, rng)
        att.forward(rng.normal(size=(1, 2)), rng.normal(size=(3, 2)))
        with pytest.raises(StateError):
            att.backward_single_query_batch(np.zeros((1, 2)))


class TestBce:
    def test_half_probability(self):
        assert bce_loss([0.5], [1]) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_perfect_prediction_is_clamped_near_zero(self):
        assert 0.0 <= bce_loss([1.0], [1]) <= 1.2e-7

    def test_hand_arithmetic(self):
        assert bce_loss([0.9, 0.1], [1, 0]) == pytest.approx(-math.log(0.9), abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            bce_loss([0.5, 0.5], [1])

    def test_nonnegative_and_zero_only_on_match(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            p = rng.uniform(size=5)
            y = rng.integers(0, 2, size=5)
            assert bce_loss(p, y) >= 0.0
        assert bce_loss([1.0, 0.0], [1, 0]) < 1e-6
        assert bce_loss([0.4], [1]) > 0.1

    def test_grad_hand_value(self):
        np.testing.assert_allclose(bce_grad([0.5], [1]), [-2.0])


class TestBackwardHandValues:
    def test_relu_grad_piecewise(self):
        layer = Relu()
        layer.forward([[-1.0, 2.0, 0.0]])
        g = layer.backward(np.ones((1, 3)))
        assert np.array_equal(g, [[0.0, 1.0, 0.0]])

    def test_dense_grads_are_outer_product(self):
        layer = make_dense([[0.0], [0.0]], [0.0])
        layer.forward([[1.0, 2.0]])
        layer.backward([[1.0]])
        np.testing.assert_allclose(layer.gw, [[1.0], [2.0]])
        np.testing.assert_allclose(layer.gb, [1.0])

    def test_dense_grad_accumulates(self):
        layer = make_dense([[1.0], [1.0]], [0.0])
        for _ in range(2):
            layer.forward([[1.0, 2.0]])
        layer.backward([[1.0]])
        layer.backward([[1.0]])
        np.testing.assert_allclose(layer.gw, [[2.0], [4.0]])


def check_layer_gradients(seed: int) -> float:
    """One randomized small-shape grad check over every layer type; returns
    the worst relative error seen."""
    rng = np.random.default_rng(seed)
    worst = 0.0

    def fd_vs_analytic(f, analytic, array):
        nonlocal worst
        numeric = numeric_gradient(f, array)
        worst = max(worst, max_rel_error(analytic, numeric))

    # dense
    n, din, dout = rng.integers(1, 7, size=3)
    layer = Dense(din, dout, rng)
    x = rng.normal(size=(n, din))
    proj = rng.normal(size=(n, dout))  # fixed projection to a scalar loss
    out = layer.forward(x)
    layer.zero_grad()
    gx = layer.backward(proj)

    def loss():
        val = float(np.sum(layer.forward(x) * proj))
        layer.reset()
        return val

    fd_vs_analytic(loss, gx, x)
    fd_vs_analytic(loss, layer.gw, layer.w)
    fd_vs_analytic(loss, layer.gb, layer.b)
    assert np.sum(out * proj) is not None

    # relu (inputs kept away from the kink)
    x = rng.normal(size=(3, 4))
    x[np.abs(x) < 0.05] = 0.1
    act = Relu()
    act.forward(x)
    proj = rng.normal(size=x.shape)
    gx = act.backward(proj)

    def loss():
        val = float(np.sum(act.forward(x) * proj))
        act.reset()
        return val

    fd_vs_analytic(loss, gx, x)

    # sigmoid
    x = rng.normal(size=(2, 3))
    act = Sigmoid()
    act.forward(x)
    proj = rng.normal(size=x.shape)
    gx = act.backward(proj)

    def loss():
        val = float(np.sum(act.forward(x) * proj))
        act.reset()
        return val

    fd_vs_analytic(loss, gx, x)

    # softmax rows
    x = rng.normal(size=(3, 4))
    act = SoftmaxRows()
    act.forward(x)
    proj = rng.normal(size=x.shape)
    gx = act.backward(proj)

    def loss():
        val = float(np.sum(act.forward(x) * proj))
        act.reset()
        return val

    fd_vs_analytic(loss, gx, x)

    # multi-head scaled-dot-product attention, through Q, K, V and projections
    heads = int(rng.integers(1, 3))
    head_dim = int(rng.integers(1, 4))
    m, nctx = rng.integers(1, 4, size=2)
    dq, dc = rng.integers(1, 7, size=2)
    att = MultiHeadCrossAttention(int(dq), int(dc), heads, head_dim, rng)
    q = rng.normal(size=(int(m), int(dq)))
    ctx = rng.normal(size=(int(nctx), int(dc)))
    proj = rng.normal(size=(int(m), heads * head_dim))
    att.forward(q, ctx)
    att.zero_grad()
    gq, gctx = att.backward(proj)

    def loss():
        val = float(np.sum(att.forward(q, ctx) * proj))
        att.reset()
        return val

    fd_vs_analytic(loss, gq, q)
    fd_vs_analytic(loss, gctx, ctx)
    for value, grad in att.params():
        fd_vs_analytic(loss, grad, value)

    # binary cross-entropy (probabilities away from the clamp)
    p = rng.uniform(0.05, 0.95, size=5)
    y = rng.integers(0, 2, size=5).astype(float)
    ga = bce_grad(p, y)

    def loss():
        return bce_loss(p, y)

    fd_vs_analytic(loss, ga, p)
    return worst


class TestGradCheck:
    @pytest.mark.parametrize("seed", range(10))
    def test_all_layers(self, seed):
        assert check_layer_gradients(seed) < 1e-4


class TestNumericUtils:
    def test_numeric_gradient_of_quadratic(self):
        x = np.array([1.0, -2.0])
        g = numeric_gradient(lambda: float(np.sum(x ** 2)), x)
        np.testing.assert_allclose(g, [2.0, -4.0], atol=1e-8)

    def test_max_rel_error_shape_mismatch(self):
        with pytest.raises(ShapeError):
            max_rel_error(np.ones(2), np.ones(3))

    def test_bce_eps_matches_framework_default(self):
        assert BCE_EPS == 1e-7
