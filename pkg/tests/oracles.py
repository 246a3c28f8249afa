"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (plain Python loops over numpy
scalars) and written straight from the mathematical definitions, so it
shares no code path with the package under test.
"""

import numpy as np


def naive_conv_forward(x, w, bias=None, stride=1, padding=0):
    """Direct 7-loop cross-correlation, innermost over (c, r, s) ascending."""
    n, c, ih, iw = x.shape
    f, _, r, s = w.shape
    oh = (ih + 2 * padding - r) // stride + 1
    ow = (iw + 2 * padding - s) // stride + 1
    out = np.zeros((n, f, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for fi in range(f):
            for oi in range(oh):
                for oj in range(ow):
                    acc = x.dtype.type(0)
                    for ci in range(c):
                        for ri in range(r):
                            for si in range(s):
                                ii = oi * stride - padding + ri
                                jj = oj * stride - padding + si
                                if 0 <= ii < ih and 0 <= jj < iw:
                                    acc = acc + w[fi, ci, ri, si] * x[ni, ci, ii, jj]
                    out[ni, fi, oi, oj] = acc
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out


def naive_matmul(a, b):
    """Triple-loop matrix product with ascending-k accumulation."""
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m), dtype=a.dtype)
    for i in range(n):
        for j in range(m):
            acc = a.dtype.type(0)
            for kk in range(k):
                acc = acc + a[i, kk] * b[kk, j]
            out[i, j] = acc
    return out


def fd_gradient(f, x, eps=1e-5):
    """Central finite differences of scalar-valued f at every coordinate."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return np.abs(a - b).max(initial=0.0) / scale


def sorted_topk_indices(values, k):
    """Indices of the k largest magnitudes; ties to the lowest flat index."""
    values = np.asarray(values).ravel()
    order = sorted(range(values.size), key=lambda i: (-abs(values[i]), i))
    return set(order[:k])


def smoothed_cross_entropy(logits, targets, smoothing):
    """Direct definition: q = smoothing/Y + (1-smoothing) on the label."""
    n, y = logits.shape
    total = 0.0
    for i in range(n):
        z = logits[i] - logits[i].max()
        logp = z - np.log(np.exp(z).sum())
        q = np.full(y, smoothing / y)
        q[targets[i]] += 1.0 - smoothing
        total += -(q * logp).sum()
    return total / n


# --- instrumented nonzero-MAC counters -------------------------------------
# Each counter walks the padded direct-convolution compute scheme and
# counts a MAC only when the explicitly sparsified operand is nonzero.

def conv_fwd_mac_counter(n, oh, ow, w):
    f, c, r, s = w.shape
    count = 0
    for ni in range(n):
        for fi in range(f):
            for oi in range(oh):
                for oj in range(ow):
                    for ci in range(c):
                        for ri in range(r):
                            for si in range(s):
                                if w[fi, ci, ri, si] != 0:
                                    count += 1
    return count


def conv_igrad_mac_counter(n, ih, iw, w):
    # rotate-and-convolve scheme: every input position sees all (f, r, s)
    f, c, r, s = w.shape
    count = 0
    for ni in range(n):
        for ci in range(c):
            for ii in range(ih):
                for jj in range(iw):
                    for fi in range(f):
                        for ri in range(r):
                            for si in range(s):
                                if w[fi, ci, ri, si] != 0:
                                    count += 1
    return count


def conv_wgrad_mac_counter(x, f, r, s):
    # every nonzero input activation participates in (f, r, s) products
    n, c, ih, iw = x.shape
    count = 0
    for ni in range(n):
        for ci in range(c):
            for ii in range(ih):
                for jj in range(iw):
                    if x[ni, ci, ii, jj] != 0:
                        count += f * r * s
    return count


def linear_fwd_mac_counter(n, w):
    return n * int(np.count_nonzero(w))


def linear_igrad_mac_counter(n, w):
    return n * int(np.count_nonzero(w))


def linear_wgrad_mac_counter(x, y_width):
    return int(np.count_nonzero(x)) * y_width
