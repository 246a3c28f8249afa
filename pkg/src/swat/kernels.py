"""Numba kernels for convolution, linear, batchnorm, and pooling layers.

Every contraction accumulates each output element in a fixed order
(ascending over the flattened C,R,S axes for convolutions, ascending over
the contraction axis for matmuls) so results are bit-reproducible and
comparable exactly against naive loop references. Convolutions have two
interchangeable paths that perform the identical floating-point
additions in the identical order: a direct loop that skips zero weights
(fast when weights are sparse) and an im2col+matmul path (fast when they
are dense). The matmul kernels skip zeros of their left operand, which
is what makes sparse saved activations genuinely cheaper in the
weight-gradient pass.

Parallelism is over independent output slices only; every element is
written by exactly one thread, so results do not depend on thread count.
"""

import os

import numpy as np
from numba import njit, prange, set_num_threads

if "SWAT_THREADS" in os.environ:
    set_num_threads(max(1, int(os.environ["SWAT_THREADS"])))

_JIT = dict(cache=True, parallel=True, fastmath=False)


@njit(**_JIT)
def matmul_nn(x, w):
    # (N, K) @ (K, M); per-element accumulation in ascending k order,
    # zero x entries skipped (thread-local accumulator rows vectorize)
    n, kk = x.shape
    m = w.shape[1]
    out = np.empty((n, m), dtype=x.dtype)
    for i in prange(n):
        acc = np.zeros(m, dtype=x.dtype)
        for k in range(kk):
            xv = x[i, k]
            if xv == 0.0:
                continue
            wrow = w[k]
            for j in range(m):
                acc[j] += xv * wrow[j]
        out[i] = acc
    return out


@njit(**_JIT)
def matmul_tn(x, dy):
    # x: (N, K), dy: (N, M) -> (K, M) = x.T @ dy, skipping zero x entries
    n, kk = x.shape
    m = dy.shape[1]
    out = np.empty((kk, m), dtype=x.dtype)
    for k in prange(kk):
        acc = np.zeros(m, dtype=x.dtype)
        for i in range(n):
            xv = x[i, k]
            if xv == 0.0:
                continue
            gyrow = dy[i]
            for j in range(m):
                acc[j] += xv * gyrow[j]
        out[k] = acc
    return out


@njit(**_JIT)
def im2col(xpad, r, s, stride, oh, ow):
    # (N, C, HP, WP) -> (N*OH*OW, C*R*S), patch axis ascending in (c, r, s)
    n, c = xpad.shape[0], xpad.shape[1]
    cols = np.empty((n * oh * ow, c * r * s), dtype=xpad.dtype)
    for ni in prange(n):
        for oi in range(oh):
            for oj in range(ow):
                row = cols[(ni * oh + oi) * ow + oj]
                idx = 0
                for ci in range(c):
                    for ri in range(r):
                        xrow = xpad[ni, ci, oi * stride + ri]
                        for si in range(s):
                            row[idx] = xrow[oj * stride + si]
                            idx += 1
    return cols


@njit(**_JIT)
def grad_cols(dy, r, s, stride, pad, ih, iw):
    # patches of the (implicitly dilated, padded) output gradient seen by
    # each input position: (N*IH*IW, F*R*S), ascending in (f, r, s)
    n, f, oh, ow = dy.shape
    cols = np.zeros((n * ih * iw, f * r * s), dtype=dy.dtype)
    for ni in prange(n):
        for ii in range(ih):
            for jj in range(iw):
                row = cols[(ni * ih + ii) * iw + jj]
                for ri in range(r):
                    num_i = ii + pad - ri
                    if num_i < 0 or num_i % stride != 0:
                        continue
                    oi = num_i // stride
                    if oi >= oh:
                        continue
                    for si in range(s):
                        num_j = jj + pad - si
                        if num_j < 0 or num_j % stride != 0:
                            continue
                        oj = num_j // stride
                        if oj >= ow:
                            continue
                        for fi in range(f):
                            row[(fi * r + ri) * s + si] = dy[ni, fi, oi, oj]
    return cols


@njit(**_JIT)
def conv2d_forward_direct(xpad, w, stride, oh, ow):
    # direct path; skips zero weights, same per-element order as im2col path
    n, c = xpad.shape[0], xpad.shape[1]
    f, r, s = w.shape[0], w.shape[2], w.shape[3]
    out = np.zeros((n, f, oh, ow), dtype=xpad.dtype)
    for ni in prange(n):
        for fi in range(f):
            for ci in range(c):
                for ri in range(r):
                    for si in range(s):
                        wv = w[fi, ci, ri, si]
                        if wv == 0.0:
                            continue
                        for oi in range(oh):
                            xrow = xpad[ni, ci, oi * stride + ri]
                            orow = out[ni, fi, oi]
                            for oj in range(ow):
                                orow[oj] += wv * xrow[oj * stride + si]
    return out


@njit(**_JIT)
def conv2d_backward_input_direct(dy, w, stride, pad, ih, iw):
    # transposed conv by scatter; skips zero weights
    n, f, oh, ow = dy.shape
    c, r, s = w.shape[1], w.shape[2], w.shape[3]
    ihp, iwp = ih + 2 * pad, iw + 2 * pad
    dx = np.zeros((n, c, ih, iw), dtype=dy.dtype)
    for ni in prange(n):
        dxp = np.zeros((c, ihp, iwp), dtype=dy.dtype)
        for fi in range(f):
            for ci in range(c):
                for ri in range(r):
                    for si in range(s):
                        wv = w[fi, ci, ri, si]
                        if wv == 0.0:
                            continue
                        for oi in range(oh):
                            drow = dxp[ci, oi * stride + ri]
                            gyrow = dy[ni, fi, oi]
                            for oj in range(ow):
                                drow[oj * stride + si] += wv * gyrow[oj]
        for ci in range(c):
            for ii in range(ih):
                for jj in range(iw):
                    dx[ni, ci, ii, jj] = dxp[ci, ii + pad, jj + pad]
    return dx


@njit(**_JIT)
def maxpool2d_forward(x, k, stride):
    n, c, ih, iw = x.shape
    oh = (ih - k) // stride + 1
    ow = (iw - k) // stride + 1
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    # flat index of the argmax within the input plane; first index wins ties
    arg = np.empty((n, c, oh, ow), dtype=np.int64)
    for ni in prange(n):
        for ci in range(c):
            for oi in range(oh):
                for oj in range(ow):
                    i0, j0 = oi * stride, oj * stride
                    best = x[ni, ci, i0, j0]
                    bidx = i0 * iw + j0
                    for ri in range(k):
                        for si in range(k):
                            v = x[ni, ci, i0 + ri, j0 + si]
                            if v > best:
                                best = v
                                bidx = (i0 + ri) * iw + (j0 + si)
                    out[ni, ci, oi, oj] = best
                    arg[ni, ci, oi, oj] = bidx
    return out, arg


@njit(**_JIT)
def maxpool2d_backward(dy, arg, ih, iw):
    n, c, oh, ow = dy.shape
    dx = np.zeros((n, c, ih, iw), dtype=dy.dtype)
    for ni in prange(n):
        for ci in range(c):
            for oi in range(oh):
                for oj in range(ow):
                    idx = arg[ni, ci, oi, oj]
                    dx[ni, ci, idx // iw, idx % iw] += dy[ni, ci, oi, oj]
    return dx


@njit(**_JIT)
def avgpool2d_forward(x, k, stride):
    n, c, ih, iw = x.shape
    oh = (ih - k) // stride + 1
    ow = (iw - k) // stride + 1
    inv = 1.0 / (k * k)
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    for ni in prange(n):
        for ci in range(c):
            for oi in range(oh):
                for oj in range(ow):
                    acc = 0.0
                    for ri in range(k):
                        for si in range(k):
                            acc += x[ni, ci, oi * stride + ri, oj * stride + si]
                    out[ni, ci, oi, oj] = acc * inv
    return out


@njit(**_JIT)
def avgpool2d_backward(dy, k, stride, ih, iw):
    n, c, oh, ow = dy.shape
    inv = 1.0 / (k * k)
    dx = np.zeros((n, c, ih, iw), dtype=dy.dtype)
    for ni in prange(n):
        for ci in range(c):
            for oi in range(oh):
                for oj in range(ow):
                    g = dy[ni, ci, oi, oj] * inv
                    for ri in range(k):
                        for si in range(k):
                            dx[ni, ci, oi * stride + ri, oj * stride + si] += g
    return dx


@njit(**_JIT)
def bn_stats(x):
    # per-channel mean and biased variance over (N, H, W), accumulated
    # sequentially in float64
    n, c, h, w = x.shape
    mean = np.empty(c, dtype=np.float64)
    var = np.empty(c, dtype=np.float64)
    m = n * h * w
    for ci in prange(c):
        acc = 0.0
        for ni in range(n):
            for ii in range(h):
                xrow = x[ni, ci, ii]
                for jj in range(w):
                    acc += xrow[jj]
        mu = acc / m
        acc2 = 0.0
        for ni in range(n):
            for ii in range(h):
                xrow = x[ni, ci, ii]
                for jj in range(w):
                    d = xrow[jj] - mu
                    acc2 += d * d
        mean[ci] = mu
        var[ci] = acc2 / m
    return mean, var


@njit(**_JIT)
def bn_normalize(x, mean, inv_std, gamma, beta):
    n, c, h, w = x.shape
    out = np.empty_like(x)
    x_hat = np.empty_like(x)
    for ni in prange(n):
        for ci in range(c):
            mu = x.dtype.type(mean[ci])
            istd = x.dtype.type(inv_std[ci])
            g = gamma[ci]
            b = beta[ci]
            for ii in range(h):
                for jj in range(w):
                    xh = (x[ni, ci, ii, jj] - mu) * istd
                    x_hat[ni, ci, ii, jj] = xh
                    out[ni, ci, ii, jj] = g * xh + b
    return out, x_hat


@njit(**_JIT)
def bn_reduce_grads(dy, x_hat):
    # (dbeta, dgamma) per channel, float64 accumulation
    n, c, h, w = dy.shape
    dbeta = np.empty(c, dtype=np.float64)
    dgamma = np.empty(c, dtype=np.float64)
    for ci in prange(c):
        sb = 0.0
        sg = 0.0
        for ni in range(n):
            for ii in range(h):
                for jj in range(w):
                    g = dy[ni, ci, ii, jj]
                    sb += g
                    sg += g * x_hat[ni, ci, ii, jj]
        dbeta[ci] = sb
        dgamma[ci] = sg
    return dbeta, dgamma


@njit(**_JIT)
def bn_input_grad(dy, x_hat, scale, mean_dy, mean_dy_xhat):
    n, c, h, w = dy.shape
    dx = np.empty_like(dy)
    for ni in prange(n):
        for ci in range(c):
            sc = dy.dtype.type(scale[ci])
            md = dy.dtype.type(mean_dy[ci])
            mdx = dy.dtype.type(mean_dy_xhat[ci])
            for ii in range(h):
                for jj in range(w):
                    dx[ni, ci, ii, jj] = sc * (dy[ni, ci, ii, jj] - md
                                               - x_hat[ni, ci, ii, jj] * mdx)
    return dx
