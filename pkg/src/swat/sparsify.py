"""Top-K sparsification machinery.

Two interchangeable modes exist for inducing sparsity:

* exact mode (`topk_exact`, `channel_topk`): keeps exactly K elements per
  scope group by magnitude, ties broken toward the lowest flat index;
* threshold mode (`topk_threshold_apply` with thresholds produced by
  `cache_thresholds`): zeroes every element with |x| <= t, where t is
  resampled every `period` iterations as the magnitude of the largest
  element that exact Top-K would drop. Immediately after a resample the
  two modes agree except on magnitude ties; between resamples realized
  sparsity may drift, which is surfaced (never hidden) by SparsifyReport.

Scopes partition a rank-4 tensor into the groups within which K is
selected: the whole tensor (NCHW), one group per sample/filter (CHW), or
one group per (sample, channel) slice (HW). Channel scope is the
structured variant for conv weights: per filter, whole channels are kept
or dropped by their L1 norm. Random scope exists purely as the
null-hypothesis baseline.
"""

import enum
from dataclasses import dataclass, field

import numpy as np


class TopKScope(enum.Enum):
    NCHW = "nchw"
    CHW = "chw"
    HW = "hw"
    CHANNEL = "channel"
    RANDOM = "random"


@dataclass(frozen=True)
class SparsifyReport:
    kept_count: int
    zeroed_count: int

    @property
    def total(self):
        return self.kept_count + self.zeroed_count

    @property
    def realized_sparsity(self):
        return self.zeroed_count / self.total if self.total else 0.0


def keep_count(group_size, sparsity):
    """K = round-half-up((1-sparsity)*n), clamped to >=1 unless sparsity is 1."""
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError(f"sparsity must be in [0, 1], got {sparsity}")
    if sparsity == 1.0:
        return 0
    k = int(np.floor((1.0 - sparsity) * group_size + 0.5))
    return min(group_size, max(1, k))


def kth_magnitude(values, k):
    """Magnitude of the k-th largest |value|, via introselect (average O(n))."""
    values = np.asarray(values).ravel()
    n = values.size
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    mags = np.abs(values)
    return mags[np.argpartition(mags, n - k)[n - k]]


def keep_threshold(values, k):
    """Largest magnitude that keeping the top k would drop (0 if k >= n).

    Zeroing |x| <= keep_threshold reproduces exact Top-K up to ties.
    """
    n = np.asarray(values).size
    if k >= n:
        return 0.0
    return float(kth_magnitude(values, k + 1))


def _topk_mask_flat(mags, k):
    """Boolean keep-mask for the k largest magnitudes, low flat index wins ties."""
    n = mags.size
    mask = np.zeros(n, dtype=bool)
    if k <= 0:
        return mask
    if k >= n:
        mask[:] = True
        return mask
    kth = mags[np.argpartition(mags, n - k)[n - k]]
    mask[mags > kth] = True
    short = k - int(mask.sum())
    if short > 0:
        mask[np.flatnonzero(mags == kth)[:short]] = True
    return mask


def _scope_groups(shape, scope):
    """(group_count, group_size) for a tensor shape under a scope."""
    size = int(np.prod(shape))
    if scope == TopKScope.NCHW:
        return 1, size
    if scope == TopKScope.CHW:
        return shape[0], size // shape[0]
    if scope == TopKScope.HW:
        return shape[0] * shape[1], size // (shape[0] * shape[1])
    raise ValueError(f"scope {scope} has no flat grouping")


def topk_exact(tensor, sparsity, scope=TopKScope.NCHW):
    """Keep exactly K largest-magnitude elements per scope group.

    Returns (sparse tensor, SparsifyReport). Kept elements that happen to
    be zero still count as kept (the report reflects the mask, not the
    value census).
    """
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError(f"sparsity must be in [0, 1], got {sparsity}")
    if scope in (TopKScope.CHW, TopKScope.HW) and tensor.ndim < 2:
        raise ValueError(f"scope {scope} needs a rank >= 2 tensor, got shape {tensor.shape}")
    if scope == TopKScope.CHANNEL:
        out, _, report = channel_topk(tensor, sparsity)
        return out, report
    groups, gsize = _scope_groups(tensor.shape, scope)
    mags = np.abs(tensor).reshape(groups, gsize)
    k = keep_count(gsize, sparsity)
    mask = np.empty((groups, gsize), dtype=bool)
    for g in range(groups):
        mask[g] = _topk_mask_flat(mags[g], k)
    mask = mask.reshape(tensor.shape)
    out = np.where(mask, tensor, tensor.dtype.type(0))
    kept = int(mask.sum())
    return out, SparsifyReport(kept, tensor.size - kept)


def topk_threshold_apply(tensor, threshold):
    """Zero every element with |x| <= threshold (keep only |x| > t).

    `threshold` may be a scalar or an array broadcastable over the tensor
    (per-group thresholds). Used in periodic mode with cached thresholds.
    """
    thr = np.asarray(threshold)
    if np.any(thr < 0):
        raise ValueError(f"threshold must be non-negative, got {threshold}")
    mask = np.abs(tensor) > thr
    out = np.where(mask, tensor, tensor.dtype.type(0))
    kept = int(mask.sum())
    return out, SparsifyReport(kept, tensor.size - kept)


def channel_topk(weight, sparsity):
    """Structured Top-K over conv weight channels.

    Per filter independently, channels are ranked by L1 norm and the top
    round((1-sparsity)*C) (at least one) are kept whole; the rest are
    zeroed entirely. Returns (sparse weight, active mask (F,C), report).
    """
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"channel sparsity must be in [0, 1), got {sparsity}")
    if weight.ndim != 4 or weight.shape[1] < 1:
        raise ValueError(f"channel Top-K expects a (F,C,R,S) weight, got shape {weight.shape}")
    f, c = weight.shape[0], weight.shape[1]
    norms = np.abs(weight).sum(axis=(2, 3))
    k = keep_count(c, sparsity)
    active = np.empty((f, c), dtype=bool)
    for fi in range(f):
        active[fi] = _topk_mask_flat(norms[fi], k)
    out = np.where(active[:, :, None, None], weight, weight.dtype.type(0))
    kept = int(active.sum()) * weight.shape[2] * weight.shape[3]
    return out, active, SparsifyReport(kept, weight.size - kept)


def random_mask(tensor, sparsity, seed):
    """Retain a uniformly random subset of exactly K elements (baseline)."""
    k = keep_count(tensor.size, sparsity)
    rng = np.random.default_rng(seed)
    keep = rng.choice(tensor.size, size=k, replace=False)
    mask = np.zeros(tensor.size, dtype=bool)
    mask[keep] = True
    return np.where(mask.reshape(tensor.shape), tensor, tensor.dtype.type(0))


def sparsification_angle(v, masked):
    """Directional deviation arccos(||masked|| / ||v||), in radians."""
    v = np.asarray(v, dtype=np.float64).ravel()
    masked = np.asarray(masked, dtype=np.float64).ravel()
    norm_v = np.linalg.norm(v)
    if norm_v == 0.0:
        raise ValueError("sparsification angle undefined for a zero vector")
    ratio = np.linalg.norm(masked) / norm_v
    return float(np.arccos(np.clip(ratio, 0.0, 1.0)))


@dataclass
class CacheEntry:
    t_w: np.ndarray = field(default_factory=lambda: np.zeros(()))
    t_a: float = 0.0
    last_sample_iter: int = -1


@dataclass
class ThresholdCache:
    """Per-layer cached Top-K thresholds with sampling period `period`."""
    period: int = 1
    entries: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.period < 1:
            raise ValueError(f"sampling period must be >= 1, got {self.period}")

    def due(self, iteration):
        return iteration % self.period == 0

    def entry(self, layer_id):
        return self.entries.setdefault(layer_id, CacheEntry())


def weight_thresholds(weight, sparsity, scope):
    """Per-group keep-thresholds for a weight tensor, broadcastable over it."""
    if scope == TopKScope.CHANNEL:
        norms = np.abs(weight).sum(axis=(2, 3))
        k = keep_count(weight.shape[1], sparsity)
        return np.array([keep_threshold(norms[fi], k) for fi in range(weight.shape[0])])
    groups, gsize = _scope_groups(weight.shape, scope)
    k = keep_count(gsize, sparsity)
    flat = weight.reshape(groups, gsize)
    thr = np.array([keep_threshold(flat[g], k) for g in range(groups)])
    if scope == TopKScope.NCHW:
        return thr.reshape(())
    if scope == TopKScope.CHW:
        return thr.reshape((weight.shape[0],) + (1,) * (weight.ndim - 1))
    return thr.reshape(weight.shape[:2] + (1,) * (weight.ndim - 2))


def channel_threshold_apply(weight, per_filter_thr):
    """Coarse-grained rule: zero channel c of filter f iff its L1 norm <= t_f."""
    thr = np.asarray(per_filter_thr)
    if np.any(thr < 0):
        raise ValueError(f"threshold must be non-negative, got {per_filter_thr}")
    norms = np.abs(weight).sum(axis=(2, 3))
    active = norms > thr[:, None]
    out = np.where(active[:, :, None, None], weight, weight.dtype.type(0))
    kept = int(active.sum()) * weight.shape[2] * weight.shape[3]
    return out, active, SparsifyReport(kept, weight.size - kept)


def cache_thresholds(cache, layer_id, weight_tensor, activation_tensor,
                     sparsity, iteration, weight_scope=TopKScope.NCHW):
    """Resample a layer's cached thresholds when the iteration is due.

    t_w covers the weight tensor under its configured scope; t_a covers
    the activation tensor at fine NCHW grain. Off-period calls return the
    cache unchanged.
    """
    if not cache.due(iteration):
        return cache
    entry = cache.entry(layer_id)
    if weight_tensor is not None:
        entry.t_w = np.asarray(weight_thresholds(weight_tensor, sparsity, weight_scope))
    if activation_tensor is not None:
        entry.t_a = keep_threshold(activation_tensor,
                                   keep_count(activation_tensor.size, sparsity))
    entry.last_sample_iter = iteration
    return cache
