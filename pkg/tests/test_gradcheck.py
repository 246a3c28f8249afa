"""Finite-difference validation of every backward op and of the composed
sparse training backward pass.

All checks run in float64. The composed check freezes the Top-K weight
masks and differentiates the loss of the masked-weight forward; the
engine's weight gradients must match at every active coordinate (the
engine also produces gradients at non-active coordinates by design;
those are exactly the dense-gradient updates and are checked separately
for the dense case).
"""

import numpy as np
import pytest

from swat import layers as L
from swat.engine import (SwatMode, backward_pass, forward_pass)
from swat.network import (AvgPool, BatchNorm, Conv, Flatten, Linear, MaxPool,
                          Network, ReLU)
from swat.plan import plan_uniform
from swat.sparsify import ThresholdCache

import oracles

TOL = 1e-5


def check_grad(analytic, numeric, tol=TOL):
    err = oracles.rel_err(analytic, numeric)
    assert err < tol, f"gradient mismatch: rel err {err:.3e}"


class TestConvGrads:
    @pytest.mark.parametrize("case", range(4))
    def test_conv_backward_matches_fd(self, case):
        rng = np.random.default_rng(100 + case)
        stride, padding = [(1, 0), (1, 1), (2, 1), (2, 0)][case]
        x = rng.standard_normal((1, 2, 4, 4))
        w = rng.standard_normal((2, 2, 3, 3))
        g = rng.standard_normal((1, 2) + L.conv_out_hw(4, 4, 3, 3, stride, padding))

        def loss_x(xv):
            return float((L.conv_forward(xv, w, stride=stride, padding=padding) * g).sum())

        def loss_w(wv):
            return float((L.conv_forward(x, wv, stride=stride, padding=padding) * g).sum())

        dx = L.conv_backward_input(g, w, (4, 4), stride, padding)
        dw = L.conv_backward_weight(g, x, (3, 3), stride, padding)
        check_grad(dx, oracles.fd_gradient(loss_x, x))
        check_grad(dw, oracles.fd_gradient(loss_w, w))

    def test_conv_backward_with_sparse_operands(self, rng):
        # gradients stay exact when the saved operands carry zeros
        x = rng.standard_normal((1, 2, 4, 4))
        x[np.abs(x) < 0.8] = 0.0
        w = rng.standard_normal((2, 2, 3, 3))
        w[np.abs(w) < 0.8] = 0.0
        g = rng.standard_normal((1, 2, 4, 4))

        def loss_w(wv):
            return float((L.conv_forward(x, wv, stride=1, padding=1) * g).sum())

        dw = L.conv_backward_weight(g, x, (3, 3), 1, 1)
        check_grad(dw, oracles.fd_gradient(loss_w, w))


class TestOtherGrads:
    def test_linear_backward_matches_fd(self, rng):
        x = rng.standard_normal((3, 5))
        w = rng.standard_normal((5, 4))
        b = rng.standard_normal(4)
        g = rng.standard_normal((3, 4))

        dx, dw, db = L.linear_backward(g, x, w)
        check_grad(dx, oracles.fd_gradient(
            lambda v: float((L.linear_forward(v, w, b) * g).sum()), x))
        check_grad(dw, oracles.fd_gradient(
            lambda v: float((L.linear_forward(x, v, b) * g).sum()), w))
        check_grad(db, oracles.fd_gradient(
            lambda v: float((L.linear_forward(x, w, v) * g).sum()), b))

    def test_batchnorm_backward_matches_fd(self, rng):
        x = rng.standard_normal((4, 3, 3, 3))
        gamma = rng.standard_normal(3) + 1.5
        beta = rng.standard_normal(3)
        g = rng.standard_normal(x.shape)

        def loss(xv, gv, bv):
            out, _ = L.batchnorm_forward(xv, gv, bv, np.zeros(3), np.ones(3))
            return float((out * g).sum())

        _, ctx = L.batchnorm_forward(x, gamma, beta, np.zeros(3), np.ones(3))
        dx, dgamma, dbeta = L.batchnorm_backward(g, ctx)
        check_grad(dx, oracles.fd_gradient(lambda v: loss(v, gamma, beta), x), 1e-5)
        check_grad(dgamma, oracles.fd_gradient(lambda v: loss(x, v, beta), gamma), 1e-5)
        check_grad(dbeta, oracles.fd_gradient(lambda v: loss(x, gamma, v), beta), 1e-5)

    def test_pool_and_relu_backward_match_fd(self, rng):
        x = rng.standard_normal((2, 2, 4, 4)) * 2.0
        g_max = rng.standard_normal((2, 2, 2, 2))
        g_avg = rng.standard_normal((2, 2, 2, 2))
        g_rel = rng.standard_normal(x.shape)

        _, arg = L.maxpool_forward(x, 2, 2)
        check_grad(L.maxpool_backward(g_max, arg, (4, 4)), oracles.fd_gradient(
            lambda v: float((L.maxpool_forward(v, 2, 2)[0] * g_max).sum()), x))
        check_grad(L.avgpool_backward(g_avg, 2, 2, (4, 4)), oracles.fd_gradient(
            lambda v: float((L.avgpool_forward(v, 2, 2) * g_avg).sum()), x))
        check_grad(L.relu_backward(g_rel, x), oracles.fd_gradient(
            lambda v: float((L.relu_forward(v) * g_rel).sum()), x))

    def test_cross_entropy_grad_matches_fd(self, rng):
        logits = rng.standard_normal((4, 6))
        targets = rng.integers(0, 6, 4)
        for smoothing in (0.0, 0.1):
            _, dlogits = L.softmax_cross_entropy(logits, targets, smoothing)
            check_grad(dlogits, oracles.fd_gradient(
                lambda v: L.softmax_cross_entropy(v, targets, smoothing)[0], logits))


def random_tiny_network(rng):
    """A random small conv net ending in a 3-class linear head."""
    c_in = int(rng.integers(1, 3))
    h = int(rng.integers(6, 9))
    layers = []
    c = c_in
    size = h
    n_conv = int(rng.integers(1, 3))
    for _ in range(n_conv):
        c_out = int(rng.integers(2, 5))
        use_bn = rng.random() < 0.5
        # bias before BN is cancelled by the mean subtraction; its true
        # gradient degenerates to zero, so only use one without BN
        layers.append(Conv(c_out, c, 3, 3, 1, 1,
                           has_bias=not use_bn and bool(rng.integers(0, 2))))
        if use_bn:
            layers.append(BatchNorm(c_out))
        layers.append(ReLU())
        if size >= 8 or (size >= 6 and rng.random() < 0.5):
            layers.append(MaxPool(2, 2) if rng.random() < 0.5 else AvgPool(2, 2))
            size //= 2
        c = c_out
    layers.append(Flatten())
    layers.append(Linear(c * size * size, 3))
    net = Network(layers, (c_in, h, h), dtype=np.float64, init_rng=rng)
    return net


def _dense_activation_cache(net):
    """Cache with a huge period and zero activation thresholds, so a
    frozen-mask forward sparsifies weights but leaves activations dense."""
    cache = ThresholdCache(period=10**9)
    for lid in net.param_layer_indices():
        entry = cache.entry(lid)
        entry.t_a = 0.0
        entry.last_sample_iter = 0
    return cache


def swat_loss(net, x, y, plan, mode, frozen_masks, cache):
    """Scalar loss of the (optionally mask-frozen) forward pass."""
    logits, _, _ = forward_pass(net, x, plan, cache, 1, mode,
                                frozen_masks=frozen_masks)
    loss, _ = L.softmax_cross_entropy(logits, y)
    net.clear_saved()
    return loss


@pytest.mark.parametrize("trial", range(20))
def test_composed_backward_matches_fd(trial):
    """End-to-end gradcheck over 20 random tiny networks.

    Dense mode checks every coordinate of every parameter. Full mode with
    sparsity (weight masks frozen, activation thresholds pinned at zero)
    checks weight gradients at the active coordinates of the masked-weight
    loss; the engine's extra non-active gradients are by design not the
    gradient of that loss.
    """
    rng = np.random.default_rng(7000 + trial)
    net = random_tiny_network(rng)
    n = 2
    x = rng.standard_normal((n,) + net.input_shape)
    y = rng.integers(0, 3, n)
    dense = trial % 2 == 0
    sparsity = 0.0 if dense else float(rng.uniform(0.3, 0.7))
    plan = plan_uniform(net, sparsity, exempt_first=False)
    mode = SwatMode.DENSE if dense else SwatMode.FULL

    if dense:
        frozen = None
        cache = ThresholdCache(period=1)
    else:
        probe_cache = ThresholdCache(period=1)
        _, _, masks = forward_pass(net, x, plan, probe_cache, 0, mode)
        net.clear_saved()
        frozen = {k: v for k, v in masks.items() if v is not None}
        cache = _dense_activation_cache(net)

    logits, _, masks = forward_pass(net, x, plan, cache, 1, mode,
                                    frozen_masks=frozen)
    loss0, dlogits = L.softmax_cross_entropy(logits, y)
    grads = backward_pass(net, dlogits, mode)
    net.clear_saved()
    assert swat_loss(net, x, y, plan, mode, frozen, cache) == pytest.approx(
        loss0, abs=1e-12)

    checked = 0
    for lid in range(len(net.layers)):
        for name, grad in grads[lid].items():
            p = net.params[lid][name]

            def loss_fn(v):
                orig = p.copy()
                p[...] = v
                val = swat_loss(net, x, y, plan, mode, frozen, cache)
                p[...] = orig
                return val

            numeric = oracles.fd_gradient(loss_fn, p.copy(), eps=1e-6)
            if name == "weight" and frozen is not None and frozen.get(lid) is not None:
                sel = frozen[lid]
                check_grad(grad[sel], numeric[sel])
            else:
                check_grad(grad, numeric)
            checked += 1
    assert checked > 0
