"""Reference forward/backward implementations of every layer kind.

Activations, weights, and gradients are plain numpy arrays in NCHW
layout (or (N, features) for linear layers). Every backward function is
hand-wired against its forward counterpart and is validated by central
finite differences in the test suite.

Convolution is cross-correlation (no kernel flip); the input gradient is
the corresponding transposed convolution. The forward and input-gradient
convolutions pick between a direct zero-skipping path and an
im2col+matmul path depending on weight density; both perform the same
additions in the same order, so the choice never changes the result.
Max-pool breaks ties toward the first flat index so gradient routing is
deterministic.
"""

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when tensor dimensions are inconsistent with the layer."""


# below this weight density the branchy zero-skipping conv kernels beat
# the im2col+matmul ones; the two paths are numerically identical
SPARSE_PATH_DENSITY = 0.5


def _require(cond, msg):
    if not cond:
        raise ShapeError(msg)


def conv_out_hw(ih, iw, r, s, stride, padding):
    oh = (ih + 2 * padding - r) // stride + 1
    ow = (iw + 2 * padding - s) // stride + 1
    _require(oh >= 1 and ow >= 1,
             f"conv kernel ({r}x{s}, stride {stride}, pad {padding}) does not fit input {ih}x{iw}")
    return oh, ow


def _pad_nchw(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _weight_density(w):
    return np.count_nonzero(w) / w.size


def conv_forward(x, w, bias=None, stride=1, padding=0):
    """Cross-correlate x (N,C,H,W) with w (F,C,R,S); bias is per-filter."""
    _require(x.ndim == 4 and w.ndim == 4,
             f"conv expects rank-4 tensors, got input {x.shape} and weight {w.shape}")
    _require(x.shape[1] == w.shape[1],
             f"conv channel mismatch: input {x.shape} vs weight {w.shape}")
    f, _, r, s = w.shape
    oh, ow = conv_out_hw(x.shape[2], x.shape[3], r, s, stride, padding)
    xpad = _pad_nchw(x, padding)
    if _weight_density(w) < SPARSE_PATH_DENSITY:
        out = kernels.conv2d_forward_direct(xpad, w, stride, oh, ow)
    else:
        cols = kernels.im2col(xpad, r, s, stride, oh, ow)
        wmat = np.ascontiguousarray(w.reshape(f, -1).T)
        out = kernels.matmul_nn(cols, wmat)
        out = np.ascontiguousarray(
            out.reshape(x.shape[0], oh, ow, f).transpose(0, 3, 1, 2))
    if bias is not None:
        _require(bias.shape == (f,),
                 f"conv bias shape {bias.shape} does not match filter count {f}")
        out += bias[None, :, None, None]
    return out


def conv_backward_input(dy, w, input_hw, stride=1, padding=0):
    """Gradient w.r.t. the conv input: transposed convolution of dy with w."""
    ih, iw = input_hw
    f, c, r, s = w.shape
    oh, ow = conv_out_hw(ih, iw, r, s, stride, padding)
    _require(dy.shape[1:] == (f, oh, ow),
             f"conv out_grad shape {dy.shape} does not match expected (N, {f}, {oh}, {ow})")
    if _weight_density(w) < SPARSE_PATH_DENSITY:
        return kernels.conv2d_backward_input_direct(dy, w, stride, padding, ih, iw)
    gcols = kernels.grad_cols(dy, r, s, stride, padding, ih, iw)
    wrot = np.ascontiguousarray(w.transpose(0, 2, 3, 1).reshape(f * r * s, c))
    dx = kernels.matmul_nn(gcols, wrot)
    return np.ascontiguousarray(
        dx.reshape(dy.shape[0], ih, iw, c).transpose(0, 3, 1, 2))


def conv_backward_weight(dy, x, kernel_hw, stride=1, padding=0):
    """Gradient w.r.t. the conv weight: dy correlated over the input.

    Zero entries of x (the saved, possibly sparsified activation) are
    skipped, so the cost scales with activation density.
    """
    r, s = kernel_hw
    oh, ow = conv_out_hw(x.shape[2], x.shape[3], r, s, stride, padding)
    _require(dy.shape[0] == x.shape[0] and dy.shape[2:] == (oh, ow),
             f"conv out_grad shape {dy.shape} inconsistent with input {x.shape}")
    n, f = dy.shape[0], dy.shape[1]
    c = x.shape[1]
    cols = kernels.im2col(_pad_nchw(x, padding), r, s, stride, oh, ow)
    dyflat = np.ascontiguousarray(dy.transpose(0, 2, 3, 1).reshape(-1, f))
    dwt = kernels.matmul_tn(cols, dyflat)  # (C*R*S, F)
    return np.ascontiguousarray(dwt.T).reshape(f, c, r, s)


def conv_bias_grad(dy):
    return dy.sum(axis=(0, 2, 3))


def linear_forward(x, w, bias=None):
    """Affine map: (N,X) @ (X,Y) + bias."""
    _require(x.ndim == 2 and w.ndim == 2,
             f"linear expects matrices, got input {x.shape} and weight {w.shape}")
    _require(x.shape[1] == w.shape[0],
             f"linear inner-dim mismatch: input {x.shape} vs weight {w.shape}")
    out = kernels.matmul_nn(x, w)
    if bias is not None:
        _require(bias.shape == (w.shape[1],),
                 f"linear bias shape {bias.shape} does not match output width {w.shape[1]}")
        out += bias[None, :]
    return out


def linear_backward(dy, x, w):
    """Returns (input_grad, weight_grad, bias_grad)."""
    _require(dy.shape == (x.shape[0], w.shape[1]),
             f"linear out_grad shape {dy.shape} does not match (N={x.shape[0]}, Y={w.shape[1]})")
    dx = kernels.matmul_nn(dy, np.ascontiguousarray(w.T))
    dw = kernels.matmul_tn(x, dy)
    db = dy.sum(axis=0)
    return dx, dw, db


def batchnorm_forward(x, gamma, beta, running_mean, running_var,
                      eps=1e-5, momentum=0.1, training=True):
    """Per-channel normalization over (N, H, W).

    Training mode uses batch statistics and updates the running stats in
    place (unbiased variance, mainstream convention); eval mode
    normalizes with the running stats. Returns (out, ctx) where ctx
    feeds batchnorm_backward.
    """
    c = x.shape[1]
    _require(gamma.shape == (c,) and beta.shape == (c,),
             f"batchnorm gamma/beta shape {gamma.shape}/{beta.shape} does not match channels {c}")
    if training:
        mean, var = kernels.bn_stats(x)
        m = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * (m / max(m - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased.astype(running_var.dtype)
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    out, x_hat = kernels.bn_normalize(x, mean, inv_std, gamma, beta)
    ctx = (x_hat, inv_std, gamma, training)
    return out, ctx


def batchnorm_backward(dy, ctx):
    """Returns (input_grad, gamma_grad, beta_grad) for the saved forward."""
    x_hat, inv_std, gamma, training = ctx
    dbeta, dgamma = kernels.bn_reduce_grads(dy, x_hat)
    scale = gamma.astype(np.float64) * inv_std
    if not training:
        dx = kernels.bn_input_grad(dy, x_hat, scale,
                                   np.zeros_like(scale), np.zeros_like(scale))
    else:
        m = dy.shape[0] * dy.shape[2] * dy.shape[3]
        dx = kernels.bn_input_grad(dy, x_hat, scale, dbeta / m, dgamma / m)
    return dx, dgamma.astype(dy.dtype), dbeta.astype(dy.dtype)


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, x):
    return np.where(x > 0.0, dy, dy.dtype.type(0))


def maxpool_forward(x, k, stride):
    _require(x.shape[2] >= k and x.shape[3] >= k,
             f"maxpool window {k} larger than input {x.shape}")
    return kernels.maxpool2d_forward(x, k, stride)


def maxpool_backward(dy, arg, input_hw):
    return kernels.maxpool2d_backward(dy, arg, input_hw[0], input_hw[1])


def avgpool_forward(x, k, stride):
    _require(x.shape[2] >= k and x.shape[3] >= k,
             f"avgpool window {k} larger than input {x.shape}")
    return kernels.avgpool2d_forward(x, k, stride)


def avgpool_backward(dy, k, stride, input_hw):
    return kernels.avgpool2d_backward(dy, k, stride, input_hw[0], input_hw[1])


def softmax_cross_entropy(logits, targets, label_smoothing=0.0):
    """Mean cross-entropy with optional label smoothing.

    Smoothed target distribution: q = smoothing/Y + (1-smoothing) on the
    true class. Returns (loss, dlogits) with dlogits = (softmax - q)/N.
    """
    n, y = logits.shape
    targets = np.asarray(targets)
    if targets.size and (targets.min() < 0 or targets.max() >= y):
        raise ValueError(f"target class out of range for {y} classes: "
                         f"[{targets.min()}, {targets.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    log_p = z - np.log(ez.sum(axis=1, keepdims=True))
    q = np.full_like(logits, label_smoothing / y)
    q[np.arange(n), targets] += 1.0 - label_smoothing
    loss = float(-(q * log_p).sum() / n)
    dlogits = (p - q) / n
    return loss, dlogits


def sgd_momentum_update(param, grad, buf, lr, momentum=0.0, weight_decay=0.0,
                        nesterov=False):
    """In-place SGD with momentum.

    buf <- momentum*buf + (grad + weight_decay*param)
    param <- param - lr*buf            (or the Nesterov combination)
    """
    _require(param.shape == grad.shape and param.shape == buf.shape,
             f"sgd shape mismatch: param {param.shape}, grad {grad.shape}, buf {buf.shape}")
    g = grad if weight_decay == 0.0 else grad + param.dtype.type(weight_decay) * param
    buf *= param.dtype.type(momentum)
    buf += g
    step = g + param.dtype.type(momentum) * buf if nesterov else buf
    param -= param.dtype.type(lr) * step
