"""Three-stage sparse training step and the surrounding training loop.

Stage 1 (forward): for each conv/linear layer, resample cached Top-K
thresholds when the iteration is due, sparsify the weights, run the
forward computation on the *dense* incoming activation, then sparsify a
copy of that activation and stash (sparse weights, sparse activation)
for the backward pass. The live activation handed to the next layer is
never sparsified; only the saved copy is. Batchnorm and all other layer
kinds run dense and save dense context.

Stage 2 (backward): input gradients flow through the saved sparse
weights, weight gradients contract the output gradient against the saved
sparse activations. The produced weight gradients are dense.

Stage 3 (update): SGD with momentum applied to all weights, active and
non-active alike, which is what lets the active topology change from
iteration to iteration. The ablation switches (masking non-active
gradients, freezing the topology after an epoch) selectively disable
exactly that mechanism.

Sensitivity modes restrict where sparsification applies: weights or
activations in the forward computation only (restored before backward),
weights plus activations in the backward only, or the output gradients
themselves (the meProp-style variant).
"""

import enum
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .network import (Add, AvgPool, BatchNorm, Conv, Flatten, Linear,
                      MaxPool, ReLU, is_param_layer)
from .plan import Strategy, plan_momentum
from .sparsify import (SparsifyReport, ThresholdCache, TopKScope,
                       cache_thresholds, channel_threshold_apply, random_mask,
                       topk_exact, topk_threshold_apply)


class LifecycleError(RuntimeError):
    """Backward invoked without the matching forward's saved context."""


class SwatMode(enum.Enum):
    DENSE = "dense"
    FULL = "full"
    FORWARD_WEIGHT = "forward-weight"
    FORWARD_ACTIVATION = "forward-activation"
    BACKWARD_WEIGHT_ACTIVATION = "backward"
    OUTPUT_GRAD = "output-grad"


# which tensors each mode sparsifies
_COMPUTE_W = frozenset({SwatMode.FULL, SwatMode.FORWARD_WEIGHT})
_COMPUTE_A = frozenset({SwatMode.FORWARD_ACTIVATION})
_SAVED_WA = frozenset({SwatMode.FULL, SwatMode.BACKWARD_WEIGHT_ACTIVATION})
_PASSIVE = frozenset({SwatMode.DENSE, SwatMode.OUTPUT_GRAD})

SENSITIVITY_MODES = (SwatMode.FORWARD_WEIGHT, SwatMode.FORWARD_ACTIVATION,
                     SwatMode.BACKWARD_WEIGHT_ACTIVATION, SwatMode.OUTPUT_GRAD)


@dataclass(frozen=True)
class AblationConfig:
    mask_nonactive_gradients: bool = False
    freeze_topology_epoch: int | None = None


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 128
    lr: float = 0.1
    lr_schedule: tuple = ()  # ((start_epoch, end_epoch, lr), ...); empty = flat lr
    warmup_epochs: int = 0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = False
    label_smoothing: float = 0.0
    seed: int = 0
    sparsity: float = 0.0
    strategy: str = "uniform"
    scope: str = "nchw"
    period: int = 1
    mode: str = "dense"
    mask_nonactive_gradients: bool = False
    freeze_topology_epoch: int | None = None
    exempt_first: bool | None = None  # None: uniform yes, erk/momentum no
    exempt_last: bool | None = None   # None: architecture default
    min_density: float = 0.02
    weight_decay_all: bool = True     # decay non-active weights too
    arch: str = "tiny-cnn"
    dataset: str = ""                 # empty: architecture default
    augment: bool = True
    train_samples: int = 0            # 0: use the whole split
    test_samples: int = 0
    dtype: str = "float32"
    eval_batch_size: int = 256

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1 or self.period < 1:
            raise ValueError("epochs, batch_size, and period must be >= 1")
        if not 0.0 <= self.sparsity <= 1.0:
            raise ValueError(f"sparsity must be in [0, 1], got {self.sparsity}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")
        SwatMode(self.mode)
        Strategy(self.strategy)
        TopKScope(self.scope)
        if np.dtype(self.dtype) not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.freeze_topology_epoch is not None and not (
                0 <= self.freeze_topology_epoch < self.epochs):
            raise ValueError("freeze_topology_epoch must lie before the last epoch")
        for start, end, rate in self.schedule():
            if rate <= 0.0:
                raise ValueError("all learning rates must be positive")
            if start > end:
                raise ValueError(f"bad schedule range {start}-{end}")
        covered = set()
        for start, end, _ in self.schedule():
            covered.update(range(start, end + 1))
        if set(range(1, self.epochs + 1)) - covered:
            raise ValueError("lr_schedule does not cover every epoch")
        return self

    def schedule(self):
        if self.lr_schedule:
            return self.lr_schedule
        return ((1, self.epochs, self.lr),)

    def lr_at(self, epoch, iteration, iters_per_epoch):
        for start, end, rate in self.schedule():
            if start <= epoch <= end:
                base = rate
                break
        else:
            raise ValueError(f"epoch {epoch} not covered by lr schedule")
        if self.warmup_epochs and epoch <= self.warmup_epochs:
            total = self.warmup_epochs * iters_per_epoch
            return base * (iteration + 1) / total
        return base

    def ablation(self):
        return AblationConfig(self.mask_nonactive_gradients, self.freeze_topology_epoch)

    def swat_mode(self):
        return SwatMode(self.mode)

    def topk_scope(self):
        return TopKScope(self.scope)


def _full_report(size):
    return SparsifyReport(size, 0)


def _weight_scope(spec, scope):
    # structured/group scopes only make sense on conv weight tensors
    if isinstance(spec, Conv):
        return scope
    return TopKScope.NCHW if scope is not TopKScope.RANDOM else scope


def _sparsify_weights(w, sparsity, cache_entry, scope, seed_tuple):
    """Apply the cached thresholds (or random baseline) to a weight tensor.

    Returns (sparse weights, boolean keep mask, report).
    """
    if scope is TopKScope.RANDOM:
        ws = random_mask(w, sparsity, seed=seed_tuple)
        mask = ws != 0
        kept = int(mask.sum())
        return ws, mask, SparsifyReport(kept, w.size - kept)
    if scope is TopKScope.CHANNEL:
        ws, active, report = channel_threshold_apply(w, cache_entry.t_w)
        mask = np.broadcast_to(active[:, :, None, None], w.shape)
        return ws, mask, report
    mask = np.abs(w) > cache_entry.t_w
    ws = np.where(mask, w, w.dtype.type(0))
    kept = int(mask.sum())
    return ws, mask, SparsifyReport(kept, w.size - kept)


def forward_pass(net, x, plan, cache, iteration, mode, scope=TopKScope.NCHW,
                 frozen_masks=None, seed=0):
    """Stage 1. Returns (logits, reports, active weight masks).

    reports[layer_id] is {"weight": SparsifyReport, "activation": ...};
    batchnorm and exempt layers report zero realized sparsity.
    """
    mode = SwatMode(mode)
    acts = {}
    reports = {}
    masks = {}

    def fetch(i):
        return x if i < 0 else acts[i]

    for lid, spec in enumerate(net.layers):
        src = net.wiring[lid]
        a_in = fetch(src[0])
        if is_param_layer(spec):
            entry = plan.entry(lid)
            w = net.params[lid]["weight"]
            bias = net.params[lid].get("bias")
            kmask = None
            ws, w_report = w, _full_report(w.size)
            a_sp, a_report = a_in, _full_report(a_in.size)
            if mode not in _PASSIVE and not entry.exempt:
                lscope = _weight_scope(spec, scope)
                frozen = frozen_masks is not None and lid in frozen_masks
                # freezing pins the weight topology; activation thresholds
                # keep their normal sampling period
                cache_thresholds(cache, lid, None if frozen else w, a_in,
                                 entry.weight_sparsity, iteration,
                                 weight_scope=lscope)
                centry = cache.entry(lid)
                if frozen:
                    kmask = frozen_masks[lid]
                    ws = np.where(kmask, w, w.dtype.type(0))
                    w_report = SparsifyReport(int(kmask.sum()), w.size - int(kmask.sum()))
                else:
                    ws, kmask, w_report = _sparsify_weights(
                        w, entry.weight_sparsity, centry, lscope,
                        (seed, lid, iteration - iteration % cache.period))
                if mode in _SAVED_WA or mode in _COMPUTE_A:
                    a_sp, a_report = topk_threshold_apply(a_in, centry.t_a)
            w_compute = ws if mode in _COMPUTE_W else w
            a_compute = a_sp if mode in _COMPUTE_A else a_in
            w_saved = ws if mode in _SAVED_WA else w
            a_saved = a_sp if mode in _SAVED_WA else a_in
            if isinstance(spec, Conv):
                out = L.conv_forward(a_compute, w_compute, bias, spec.stride, spec.padding)
                net.saved[lid] = ("conv", w_saved, a_saved, spec)
            else:
                out = L.linear_forward(a_compute, w_compute, bias)
                net.saved[lid] = ("linear", w_saved, a_saved)
            reports[lid] = {"weight": w_report, "activation": a_report}
            masks[lid] = kmask
        elif isinstance(spec, BatchNorm):
            out, ctx = L.batchnorm_forward(
                a_in, net.params[lid]["gamma"], net.params[lid]["beta"],
                net.buffers[lid]["running_mean"], net.buffers[lid]["running_var"],
                spec.eps, spec.momentum, training=True)
            net.saved[lid] = ("bn", ctx)
            reports[lid] = {"weight": _full_report(sum(p.size for p in net.params[lid].values())),
                            "activation": _full_report(a_in.size)}
        elif isinstance(spec, ReLU):
            out = L.relu_forward(a_in)
            net.saved[lid] = ("relu", a_in)
        elif isinstance(spec, MaxPool):
            out, arg = L.maxpool_forward(a_in, spec.k, spec.stride)
            net.saved[lid] = ("maxpool", arg, a_in.shape[2:])
        elif isinstance(spec, AvgPool):
            out = L.avgpool_forward(a_in, spec.k, spec.stride)
            net.saved[lid] = ("avgpool", a_in.shape[2:])
        elif isinstance(spec, Flatten):
            out = a_in.reshape(a_in.shape[0], -1)
            net.saved[lid] = ("flatten", a_in.shape)
        elif isinstance(spec, Add):
            out = a_in + fetch(src[1])
            net.saved[lid] = ("add",)
        else:
            raise TypeError(f"unknown layer spec {spec!r}")
        acts[lid] = out
    return acts[len(net.layers) - 1], reports, masks


def backward_pass(net, logit_grad, mode, plan=None):
    """Stage 2. Returns per-layer gradient dicts (dense weight gradients)."""
    mode = SwatMode(mode)
    n_layers = len(net.layers)
    grads = [dict() for _ in range(n_layers)]
    gacc = {n_layers - 1: logit_grad}

    def send(i, g):
        if i < 0:
            return
        if i in gacc:
            gacc[i] = gacc[i] + g
        else:
            gacc[i] = g

    for lid in range(n_layers - 1, -1, -1):
        if lid not in gacc:
            continue
        dy = gacc.pop(lid)
        saved = net.saved[lid]
        if saved is None:
            raise LifecycleError(
                f"layer {lid}: backward invoked but forward saved no context")
        spec = net.layers[lid]
        src = net.wiring[lid]
        kind = saved[0]
        if kind in ("conv", "linear"):
            if mode is SwatMode.OUTPUT_GRAD and plan is not None:
                entry = plan.entry(lid)
                if not entry.exempt and entry.weight_sparsity > 0:
                    dy, _ = topk_exact(dy, entry.weight_sparsity, TopKScope.NCHW)
            if kind == "conv":
                _, ws, a_sp, cspec = saved
                grads[lid]["weight"] = L.conv_backward_weight(
                    dy, a_sp, (cspec.kh, cspec.kw), cspec.stride, cspec.padding)
                if "bias" in net.params[lid]:
                    grads[lid]["bias"] = L.conv_bias_grad(dy)
                if src[0] >= 0:  # no gradient flows past the network input
                    send(src[0], L.conv_backward_input(
                        dy, ws, a_sp.shape[2:], cspec.stride, cspec.padding))
            else:
                _, ws, a_sp = saved
                dx, dw, db = L.linear_backward(dy, a_sp, ws)
                grads[lid]["weight"] = dw
                if "bias" in net.params[lid]:
                    grads[lid]["bias"] = db
                if src[0] >= 0:
                    send(src[0], dx)
        elif kind == "bn":
            dx, dgamma, dbeta = L.batchnorm_backward(dy, saved[1])
            grads[lid]["gamma"] = dgamma
            grads[lid]["beta"] = dbeta
            send(src[0], dx)
        elif kind == "relu":
            send(src[0], L.relu_backward(dy, saved[1]))
        elif kind == "maxpool":
            send(src[0], L.maxpool_backward(dy, saved[1], saved[2]))
        elif kind == "avgpool":
            send(src[0], L.avgpool_backward(dy, spec.k, spec.stride, saved[1]))
        elif kind == "flatten":
            send(src[0], dy.reshape(saved[1]))
        elif kind == "add":
            send(src[0], dy)
            send(src[1], dy)
    return grads


def parameter_update(net, grads, lr, momentum=0.0, weight_decay=0.0,
                     nesterov=False, active_masks=None,
                     mask_nonactive=False, weight_decay_all=True):
    """Stage 3. Dense SGD-momentum update of every trainable parameter.

    With mask_nonactive, weight gradients of non-active elements are
    zeroed before entering the optimizer (the ablation variant); weight
    decay still reaches every weight unless weight_decay_all is off.
    """
    for lid in range(len(net.layers)):
        for name, g in grads[lid].items():
            p = net.params[lid][name]
            buf = net.momentum[lid][name]
            if name == "weight" and mask_nonactive and active_masks is not None:
                mask = active_masks.get(lid)
                if mask is not None:
                    g = np.where(mask, g, g.dtype.type(0))
                    if not weight_decay_all:
                        wd_masked = np.where(mask, p, p.dtype.type(0))
                        L.sgd_momentum_update(p, g + weight_decay * wd_masked, buf,
                                              lr, momentum, 0.0, nesterov)
                        continue
            L.sgd_momentum_update(p, g, buf, lr, momentum, weight_decay, nesterov)


def active_masks_from_cache(net, plan, cache, scope):
    """Recover each layer's current active-weight mask from the cached
    thresholds (a pure function of checkpointable state)."""
    masks = {}
    for lid in net.param_layer_indices():
        if plan.entry(lid).exempt or lid not in cache.entries:
            continue
        w = net.params[lid]["weight"]
        lscope = _weight_scope(net.layers[lid], scope)
        entry = cache.entries[lid]
        if lscope is TopKScope.CHANNEL:
            active = np.abs(w).sum(axis=(2, 3)) > np.asarray(entry.t_w)[:, None]
            masks[lid] = np.broadcast_to(active[:, :, None, None], w.shape)
        else:
            masks[lid] = np.abs(w) > entry.t_w
    return masks


@dataclass
class TrainState:
    """Everything a training step mutates, bundled for checkpointing."""
    net: object
    cfg: TrainConfig
    plan: object
    cache: ThresholdCache
    iteration: int = 0
    epoch: int = 1
    frozen_masks: dict | None = None
    last_masks: dict = field(default_factory=dict)

    def maybe_refresh_plan(self):
        if (Strategy(self.cfg.strategy) is Strategy.MOMENTUM
                and self.frozen_masks is None
                and self.iteration > 0 and self.cache.due(self.iteration)):
            masks = active_masks_from_cache(self.net, self.plan, self.cache,
                                            self.cfg.topk_scope())
            self.plan = plan_momentum(
                self.net, self.cfg.sparsity,
                active_masks=masks or None,
                min_density=self.cfg.min_density,
                exempt_first=bool(self.cfg.exempt_first),
                exempt_last=bool(self.cfg.exempt_last))


def train_step(state, x, y, lr):
    """One full forward/backward/update on a mini-batch."""
    net, cfg = state.net, state.cfg
    state.maybe_refresh_plan()
    logits, reports, masks = forward_pass(
        net, x, state.plan, state.cache, state.iteration, cfg.swat_mode(),
        scope=cfg.topk_scope(), frozen_masks=state.frozen_masks, seed=cfg.seed)
    loss, dlogits = L.softmax_cross_entropy(logits, y, cfg.label_smoothing)
    grads = backward_pass(net, dlogits, cfg.swat_mode(), plan=state.plan)
    parameter_update(net, grads, lr, cfg.momentum, cfg.weight_decay,
                     cfg.nesterov, active_masks=masks,
                     mask_nonactive=cfg.mask_nonactive_gradients,
                     weight_decay_all=cfg.weight_decay_all)
    net.clear_saved()
    state.last_masks = {k: v for k, v in masks.items() if v is not None}
    state.iteration += 1
    acc = float((logits.argmax(axis=1) == y).mean())
    return loss, acc, reports


def inference_forward(net, x, plan=None, scope=TopKScope.NCHW, sparse_weights=False,
                      frozen_masks=None):
    """Eval-mode forward: running BN stats, optionally Top-K-pruned weights.

    When the training run froze its topology, the deployable sparse model
    is the frozen mask applied to the weights, not a fresh Top-K pick.
    """
    acts = {}

    def fetch(i):
        return x if i < 0 else acts[i]

    for lid, spec in enumerate(net.layers):
        src = net.wiring[lid]
        a_in = fetch(src[0])
        if is_param_layer(spec):
            w = net.params[lid]["weight"]
            bias = net.params[lid].get("bias")
            if sparse_weights and frozen_masks is not None and lid in frozen_masks:
                w = np.where(frozen_masks[lid], w, w.dtype.type(0))
            elif sparse_weights and plan is not None and not plan.entry(lid).exempt:
                use_scope = _weight_scope(spec, scope)
                if use_scope is TopKScope.RANDOM:
                    use_scope = TopKScope.NCHW
                w, _ = topk_exact(w, plan.entry(lid).weight_sparsity, use_scope)
            if isinstance(spec, Conv):
                out = L.conv_forward(a_in, w, bias, spec.stride, spec.padding)
            else:
                out = L.linear_forward(a_in, w, bias)
        elif isinstance(spec, BatchNorm):
            out, _ = L.batchnorm_forward(
                a_in, net.params[lid]["gamma"], net.params[lid]["beta"],
                net.buffers[lid]["running_mean"], net.buffers[lid]["running_var"],
                spec.eps, spec.momentum, training=False)
        elif isinstance(spec, ReLU):
            out = L.relu_forward(a_in)
        elif isinstance(spec, MaxPool):
            out, _ = L.maxpool_forward(a_in, spec.k, spec.stride)
        elif isinstance(spec, AvgPool):
            out = L.avgpool_forward(a_in, spec.k, spec.stride)
        elif isinstance(spec, Flatten):
            out = a_in.reshape(a_in.shape[0], -1)
        elif isinstance(spec, Add):
            out = a_in + fetch(src[1])
        acts[lid] = out
    return acts[len(net.layers) - 1]


def evaluate(net, batches, plan=None, scope=TopKScope.NCHW, sparsify_inference=False,
             frozen_masks=None):
    """Mean cross-entropy loss and top-1 accuracy over (x, y) batches.

    Activations stay dense; weights are pruned with exact Top-K (or the
    frozen topology mask) when sparsify_inference is set."""
    total_loss = 0.0
    correct = 0
    count = 0
    for x, y in batches:
        logits = inference_forward(net, x, plan, scope, sparsify_inference,
                                   frozen_masks=frozen_masks)
        loss, _ = L.softmax_cross_entropy(logits, y, 0.0)
        total_loss += loss * x.shape[0]
        correct += int((logits.argmax(axis=1) == y).sum())
        count += x.shape[0]
    if count == 0:
        raise ValueError("evaluate received no batches")
    return total_loss / count, correct / count
