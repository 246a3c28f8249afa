"""Forward-op unit tests against hand cases and naive loop oracles."""

import numpy as np
import pytest

from swat import layers as L
from swat.layers import ShapeError

import oracles


def t4(data):
    return np.asarray(data, dtype=np.float64).reshape(1, 1, *np.shape(data))


class TestConvForward:
    def test_1x1_kernel_scales_elementwise(self):
        x = t4([[1.0, 2.0], [3.0, 4.0]])
        w = np.full((1, 1, 1, 1), 2.0)
        out = L.conv_forward(x, w)
        np.testing.assert_array_equal(out, t4([[2.0, 4.0], [6.0, 8.0]]))

    def test_full_window_sums(self):
        x = t4([[1.0, 2.0], [3.0, 4.0]])
        w = np.ones((1, 1, 2, 2))
        out = L.conv_forward(x, w)
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 10.0

    def test_zero_weight_gives_zero_output(self, rng):
        x = rng.standard_normal((2, 3, 5, 5))
        w = np.zeros((4, 3, 3, 3))
        out = L.conv_forward(x, w, stride=1, padding=1)
        assert np.all(out == 0.0)
        bias = np.array([1.0, 2.0, 3.0, 4.0])
        out = L.conv_forward(x, w, bias, stride=1, padding=1)
        np.testing.assert_array_equal(out, np.broadcast_to(
            bias[None, :, None, None], out.shape))

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_matches_naive_loop_exactly(self, rng, stride, padding):
        # both sides accumulate in the same (c, r, s) order, so this is
        # exact equality, not approximate
        x = rng.standard_normal((2, 3, 7, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        got = L.conv_forward(x, w, stride=stride, padding=padding)
        want = oracles.naive_conv_forward(x, w, stride=stride, padding=padding)
        np.testing.assert_array_equal(got, want)

    def test_sparse_and_dense_paths_agree_exactly(self, rng):
        x = rng.standard_normal((2, 4, 6, 6))
        w = rng.standard_normal((8, 4, 3, 3))
        dense = L.conv_forward(x, w, padding=1)
        ws = w.copy()
        ws[np.abs(ws) < np.quantile(np.abs(ws), 0.9)] = 0.0
        sparse = L.conv_forward(x, ws, padding=1)
        np.testing.assert_array_equal(
            sparse, oracles.naive_conv_forward(x, ws, padding=1))
        assert dense.shape == sparse.shape

    def test_channel_mismatch_raises_with_shapes(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        w = rng.standard_normal((1, 3, 3, 3))
        with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
            L.conv_forward(x, w)


class TestConvBackwardShapes:
    def test_zero_out_grad_gives_zero_grads(self, rng):
        x = rng.standard_normal((2, 3, 5, 5))
        w = rng.standard_normal((4, 3, 3, 3))
        dy = np.zeros((2, 4, 5, 5))
        dx = L.conv_backward_input(dy, w, (5, 5), 1, 1)
        dw = L.conv_backward_weight(dy, x, (3, 3), 1, 1)
        assert np.all(dx == 0.0) and dx.shape == x.shape
        assert np.all(dw == 0.0) and dw.shape == w.shape

    def test_unit_out_grad_recovers_kernel(self):
        # single output position: input grad is the kernel itself
        w = np.arange(4.0).reshape(1, 1, 2, 2)
        dy = np.ones((1, 1, 1, 1))
        dx = L.conv_backward_input(dy, w, (2, 2))
        np.testing.assert_array_equal(dx[0, 0], w[0, 0])

    def test_zero_input_gives_zero_weight_grad(self, rng):
        dy = rng.standard_normal((2, 4, 4, 4))
        x = np.zeros((2, 3, 4, 4))
        dw = L.conv_backward_weight(dy, x, (3, 3), 1, 1)
        assert np.all(dw == 0.0)

    def test_1x1_weight_grad_is_elementwise_sum(self, rng):
        x = rng.standard_normal((2, 1, 3, 3))
        dy = rng.standard_normal((2, 1, 3, 3))
        dw = L.conv_backward_weight(dy, x, (1, 1))
        np.testing.assert_allclose(dw[0, 0, 0, 0], (x * dy).sum(), rtol=1e-12)

    def test_shape_mismatch_raises(self, rng):
        w = rng.standard_normal((4, 3, 3, 3))
        dy = rng.standard_normal((2, 4, 9, 9))
        with pytest.raises(ShapeError):
            L.conv_backward_input(dy, w, (5, 5), 1, 1)


class TestLinear:
    def test_identity_weight(self, rng):
        x = rng.standard_normal((3, 4))
        out = L.linear_forward(x, np.eye(4))
        np.testing.assert_array_equal(out, x)

    def test_hand_case_with_bias(self):
        x = np.array([[1.0, 2.0]])
        w = np.eye(2)
        b = np.array([3.0, 3.0])
        np.testing.assert_array_equal(L.linear_forward(x, w, b), [[4.0, 5.0]])

    def test_matches_naive_matmul_exactly(self, rng):
        x = rng.standard_normal((5, 7))
        w = rng.standard_normal((7, 4))
        np.testing.assert_array_equal(L.linear_forward(x, w),
                                      oracles.naive_matmul(x, w))

    def test_backward_zero_grad(self, rng):
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((4, 2))
        dx, dw, db = L.linear_backward(np.zeros((3, 2)), x, w)
        assert np.all(dx == 0) and np.all(dw == 0) and np.all(db == 0)

    def test_backward_scalar_chain_rule(self):
        x = np.array([[3.0]])
        w = np.array([[2.0]])
        dy = np.array([[5.0]])
        dx, dw, db = L.linear_backward(dy, x, w)
        assert dx[0, 0] == 10.0 and dw[0, 0] == 15.0 and db[0] == 5.0

    def test_inner_dim_mismatch(self, rng):
        with pytest.raises(ShapeError):
            L.linear_forward(rng.standard_normal((2, 3)), rng.standard_normal((4, 2)))


class TestBatchNorm:
    def _fresh(self, c):
        return (np.ones(c), np.zeros(c), np.zeros(c), np.ones(c))

    def test_constant_input_returns_beta(self):
        gamma, beta, rm, rv = self._fresh(2)
        beta = np.array([1.5, -2.0])
        x = np.ones((4, 2, 3, 3)) * np.array([5.0, -1.0])[None, :, None, None]
        out, _ = L.batchnorm_forward(x, gamma, beta, rm, rv)
        np.testing.assert_allclose(out, np.broadcast_to(
            beta[None, :, None, None], out.shape), atol=1e-6)

    def test_normalizes_mean_and_variance(self, rng):
        gamma, beta, rm, rv = self._fresh(3)
        x = rng.standard_normal((8, 3, 5, 5)) * 4.0 + 2.0
        out, _ = L.batchnorm_forward(x, gamma, beta, rm, rv)
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-7)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-4)

    def test_eval_mode_identity_with_unit_stats(self, rng):
        gamma, beta, rm, rv = self._fresh(2)
        x = rng.standard_normal((2, 2, 4, 4))
        out, _ = L.batchnorm_forward(x, gamma, beta, rm, rv, training=False)
        # identity up to the eps term inside 1/sqrt(var + eps)
        np.testing.assert_allclose(out, x, rtol=2e-5, atol=1e-7)

    def test_backward_beta_grad_is_channel_sum(self, rng):
        gamma, beta, rm, rv = self._fresh(3)
        x = rng.standard_normal((4, 3, 2, 2))
        _, ctx = L.batchnorm_forward(x, gamma, beta, rm, rv)
        dy = rng.standard_normal(x.shape)
        _, _, dbeta = L.batchnorm_backward(dy, ctx)
        np.testing.assert_allclose(dbeta, dy.sum(axis=(0, 2, 3)), rtol=1e-6)

    def test_zero_out_grad(self, rng):
        gamma, beta, rm, rv = self._fresh(2)
        x = rng.standard_normal((2, 2, 3, 3))
        _, ctx = L.batchnorm_forward(x, gamma, beta, rm, rv)
        dx, dgamma, dbeta = L.batchnorm_backward(np.zeros_like(x), ctx)
        assert np.all(dx == 0) and np.all(dgamma == 0) and np.all(dbeta == 0)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            L.batchnorm_forward(rng.standard_normal((1, 3, 2, 2)),
                                np.ones(2), np.zeros(2), np.zeros(2), np.ones(2))


class TestActivationsAndPools:
    def test_relu_values(self):
        x = np.array([[-1.0, 2.0]])
        np.testing.assert_array_equal(L.relu_forward(x), [[0.0, 2.0]])

    def test_maxpool_routes_gradient_to_argmax(self):
        x = t4([[1.0, 2.0], [3.0, 4.0]])
        out, arg = L.maxpool_forward(x, 2, 2)
        assert out[0, 0, 0, 0] == 4.0
        dx = L.maxpool_backward(np.ones_like(out), arg, (2, 2))
        np.testing.assert_array_equal(dx, t4([[0.0, 0.0], [0.0, 1.0]]))

    def test_maxpool_tie_breaks_to_first_index(self):
        x = t4([[7.0, 7.0], [7.0, 7.0]])
        _, arg = L.maxpool_forward(x, 2, 2)
        assert arg[0, 0, 0, 0] == 0
        dx = L.maxpool_backward(np.ones((1, 1, 1, 1)), arg, (2, 2))
        np.testing.assert_array_equal(dx, t4([[1.0, 0.0], [0.0, 0.0]]))

    def test_avgpool_spreads_gradient_uniformly(self, rng):
        x = rng.standard_normal((1, 1, 4, 4))
        out = L.avgpool_forward(x, 2, 2)
        np.testing.assert_allclose(out[0, 0, 0, 0], x[0, 0, :2, :2].mean(), rtol=1e-12)
        dx = L.avgpool_backward(np.ones_like(out), 2, 2, (4, 4))
        np.testing.assert_allclose(dx, np.full_like(x, 0.25))


class TestSoftmaxCrossEntropy:
    def test_uniform_logits_loss_is_log_y(self):
        logits = np.zeros((4, 10))
        loss, _ = L.softmax_cross_entropy(logits, np.arange(4) % 10)
        np.testing.assert_allclose(loss, np.log(10.0), rtol=1e-12)

    def test_confident_correct_prediction_loss_vanishes(self):
        logits = np.full((2, 5), -50.0)
        logits[0, 1] = 50.0
        logits[1, 3] = 50.0
        loss, _ = L.softmax_cross_entropy(logits, np.array([1, 3]))
        assert loss < 1e-12

    def test_label_smoothing_matches_direct_formula(self, rng):
        logits = rng.standard_normal((6, 10)) * 3.0
        targets = rng.integers(0, 10, 6)
        loss, _ = L.softmax_cross_entropy(logits, targets, label_smoothing=0.1)
        want = oracles.smoothed_cross_entropy(logits, targets, 0.1)
        np.testing.assert_allclose(loss, want, atol=1e-12)

    def test_target_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            L.softmax_cross_entropy(np.zeros((1, 3)), np.array([3]))


class TestSgdMomentum:
    def test_no_grad_no_motion(self):
        p = np.array([1.0, -2.0])
        buf = np.zeros(2)
        L.sgd_momentum_update(p, np.zeros(2), buf, lr=0.1, momentum=0.9)
        np.testing.assert_array_equal(p, [1.0, -2.0])

    def test_plain_sgd(self):
        p = np.array([1.0])
        buf = np.zeros(1)
        L.sgd_momentum_update(p, np.array([0.5]), buf, lr=0.1)
        np.testing.assert_allclose(p, [0.95], rtol=1e-12)

    def test_two_steps_match_scalar_recurrence(self):
        lr, mom, wd = 0.1, 0.9, 0.01
        p = np.array([2.0])
        buf = np.zeros(1)
        ref_p, ref_b = 2.0, 0.0
        for g in (0.3, -0.7):
            L.sgd_momentum_update(p, np.array([g]), buf, lr, mom, wd)
            gg = g + wd * ref_p
            ref_b = mom * ref_b + gg
            ref_p = ref_p - lr * ref_b
        np.testing.assert_allclose(p, [ref_p], atol=1e-12)
        np.testing.assert_allclose(buf, [ref_b], atol=1e-12)

    def test_nesterov_first_step(self):
        p = np.array([1.0])
        buf = np.zeros(1)
        L.sgd_momentum_update(p, np.array([1.0]), buf, lr=0.1, momentum=0.9,
                              nesterov=True)
        # buf = 1, step = g + momentum*buf = 1.9
        np.testing.assert_allclose(p, [1.0 - 0.19], rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            L.sgd_momentum_update(np.zeros(2), np.zeros(3), np.zeros(2), 0.1)
