"""Analytic MAC accounting for conv and linear layers.

Counting convention: one MAC is one multiply plus one accumulate. The
counters model a direct (padded) convolution in which only the sparse
operand's zeros are skipped, so every count is exactly

    density x (dense MAC count)

with the density of the operand that is explicitly sparsified: weights
for the forward pass and the input-gradient pass, input activations for
the weight-gradient pass. All formula arguments are densities (retained
fractions), never sparsities. Top-K/threshold bookkeeping FLOPs and the
(negligible) batchnorm/pool/activation work are excluded from the
reduction ratios.

The training total for a network skips the input-gradient term of the
topologically first parameterized layer, since no gradient flows past
the network input.
"""

from dataclasses import dataclass

import numpy as np

from .network import Conv, Linear, is_param_layer
from .plan import activation_input_counts

# natural zero fraction of post-ReLU activations assumed when comparing
# against baselines that do not explicitly sparsify activations
DEFAULT_ACTIVATION_DENSITY = 0.5

BASELINE_CONVENTIONS = ("dense", "default-activation")


def _count(x):
    return int(round(x))


def _check_density(d):
    if not 0.0 <= d <= 1.0:
        raise ValueError(f"density must be in [0, 1], got {d}")


def conv_forward_flops(n, c, x, y, f, r, s, h, w, weight_density=1.0):
    """MACs to produce the (n,f,h,w) output from a (c,x,y) input."""
    _check_density(weight_density)
    return _count(weight_density * f * (c * r * s) * n * h * w)


def conv_input_grad_flops(n, c, x, y, f, r, s, h, w, weight_density=1.0):
    """MACs of the transposed convolution producing the (c,x,y) input gradient."""
    _check_density(weight_density)
    return _count(weight_density * c * (f * r * s) * n * x * y)


def conv_weight_grad_flops(n, c, x, y, f, r, s, h, w, activation_density=1.0):
    """MACs of the weight-gradient deconvolution; independent of weight density."""
    _check_density(activation_density)
    return _count(activation_density * (n * x * y) * f * (c * r * s))


def linear_flops(n, x, y, density=1.0, pass_="fwd"):
    """Linear-layer MACs. Backward is twice forward; `density` may be a
    (weight, activation) pair applying to the input-grad and weight-grad
    halves respectively."""
    if pass_ not in ("fwd", "bwd"):
        raise ValueError(f"pass must be 'fwd' or 'bwd', got {pass_!r}")
    if pass_ == "fwd":
        _check_density(density)
        return _count(density * n * x * y)
    d_w, d_a = density if isinstance(density, tuple) else (density, density)
    _check_density(d_w)
    _check_density(d_a)
    return _count(d_w * n * x * y) + _count(d_a * n * x * y)


@dataclass(frozen=True)
class LayerFlops:
    layer_id: int
    kind: str
    forward_macs: int
    input_grad_macs: int
    weight_grad_macs: int
    d_w: float
    d_a: float

    @property
    def training_macs(self):
        return self.forward_macs + self.input_grad_macs + self.weight_grad_macs


@dataclass(frozen=True)
class FlopReport:
    layers: list
    baseline: list
    training_flop_reduction: float
    inference_flop_reduction: float
    activation_memory_reduction: float

    @property
    def training_macs(self):
        return sum(l.training_macs for l in self.layers)

    @property
    def inference_macs(self):
        return sum(l.forward_macs for l in self.layers)

    @property
    def baseline_training_macs(self):
        return sum(l.training_macs for l in self.baseline)

    @property
    def baseline_inference_macs(self):
        return sum(l.forward_macs for l in self.baseline)

    def to_table(self):
        lines = [f"{'layer':>5}  {'kind':<7} {'d_w':>6} {'d_a':>6} "
                 f"{'fwd MACs':>12} {'igrad MACs':>12} {'wgrad MACs':>12}"]
        for l in self.layers:
            lines.append(f"{l.layer_id:>5}  {l.kind:<7} {l.d_w:>6.3f} {l.d_a:>6.3f} "
                         f"{l.forward_macs:>12} {l.input_grad_macs:>12} {l.weight_grad_macs:>12}")
        lines.append(f"training MACs {self.training_macs} "
                     f"(dense {self.baseline_training_macs}), "
                     f"reduction {self.training_flop_reduction:.1f}%")
        lines.append(f"inference MACs {self.inference_macs} "
                     f"(dense {self.baseline_inference_macs}), "
                     f"reduction {self.inference_flop_reduction:.1f}%")
        lines.append(f"activation memory reduction {self.activation_memory_reduction:.1f}%")
        return "\n".join(lines)

    def to_csv_rows(self):
        rows = ["layer,kind,d_w,d_a,forward_macs,input_grad_macs,weight_grad_macs"]
        for l in self.layers:
            rows.append(f"{l.layer_id},{l.kind},{l.d_w},{l.d_a},"
                        f"{l.forward_macs},{l.input_grad_macs},{l.weight_grad_macs}")
        return rows


def _layer_geometry(network, lid):
    spec = network.layers[lid]
    src = network.wiring[lid][0]
    in_shape = network.input_shape if src < 0 else network.shapes[src]
    out_shape = network.shapes[lid]
    if isinstance(spec, Conv):
        c, x, y = in_shape
        f, h, w = out_shape
        return ("conv", dict(c=c, x=x, y=y, f=f, r=spec.kh, s=spec.kw, h=h, w=w))
    assert isinstance(spec, Linear)
    return ("linear", dict(x=in_shape[0], y=out_shape[0]))


def _layer_flops(network, lid, n, d_w, d_a, skip_input_grad):
    kind, g = _layer_geometry(network, lid)
    if kind == "conv":
        fwd = conv_forward_flops(n, weight_density=d_w, **g)
        igrad = 0 if skip_input_grad else conv_input_grad_flops(n, weight_density=d_w, **g)
        wgrad = conv_weight_grad_flops(n, activation_density=d_a, **g)
    else:
        fwd = linear_flops(n, g["x"], g["y"], d_w, "fwd")
        igrad = 0 if skip_input_grad else _count(d_w * n * g["x"] * g["y"])
        wgrad = _count(d_a * n * g["x"] * g["y"])
    return LayerFlops(lid, kind, fwd, igrad, wgrad, d_w, d_a)


def training_flop_report(network, plan, batch=1, baseline="dense"):
    """Network-level MAC totals and reduction percentages under a plan.

    The dense baseline runs every density at 1, except that under the
    'default-activation' convention its weight-gradient pass is charged
    at the natural post-ReLU activation density (the comparison used for
    methods that do not sparsify activations explicitly).
    """
    if baseline not in BASELINE_CONVENTIONS:
        raise ValueError(f"baseline must be one of {BASELINE_CONVENTIONS}, got {baseline!r}")
    base_da = 1.0 if baseline == "dense" else DEFAULT_ACTIVATION_DENSITY
    first = network.first_param_layer()
    layers, base = [], []
    for lid in network.param_layer_indices():
        e = plan.entry(lid)
        d_w = 1.0 - e.weight_sparsity
        d_a = 1.0 - e.activation_sparsity
        layers.append(_layer_flops(network, lid, batch, d_w, d_a, lid == first))
        base.append(_layer_flops(network, lid, batch, 1.0, base_da, lid == first))
    train_total = sum(l.training_macs for l in layers)
    train_base = sum(l.training_macs for l in base)
    inf_total = sum(l.forward_macs for l in layers)
    inf_base = sum(l.forward_macs for l in base)
    a_counts = activation_input_counts(network)
    saved = {lid: a_counts[lid] for lid in a_counts}
    # batchnorm inputs are saved dense alongside the sparsified conv/linear inputs
    for lid, spec in enumerate(network.layers):
        if type(spec).__name__ == "BatchNorm":
            src = network.wiring[lid][0]
            shape = network.input_shape if src < 0 else network.shapes[src]
            saved[lid] = int(np.prod(shape))
    act_total = sum(saved.values())
    act_zeroed = sum(saved[lid] * plan.entry(lid).activation_sparsity
                     for lid in a_counts)
    return FlopReport(
        layers=layers,
        baseline=base,
        training_flop_reduction=100.0 * (1.0 - train_total / train_base),
        inference_flop_reduction=100.0 * (1.0 - inf_total / inf_base),
        activation_memory_reduction=100.0 * act_zeroed / act_total,
    )
