"""Network container: layer specs, parameters, and shape inference.

A network is an ordered list of layer specs plus a wiring list giving
each layer's input producers (index -1 is the network input, the default
wiring is sequential). The only multi-input layer is Add, which realizes
residual connections; everything else consumes a single tensor.

Parameters, momentum buffers, and batchnorm running stats live in
per-layer dicts keyed by name. Saved per-layer contexts are written by
the engine's forward pass and consumed by its backward pass within a
single training step.
"""

from dataclasses import dataclass, field

import numpy as np

from .layers import ShapeError, conv_out_hw


@dataclass(frozen=True)
class Conv:
    out_channels: int
    in_channels: int
    kh: int
    kw: int
    stride: int = 1
    padding: int = 0
    has_bias: bool = False


@dataclass(frozen=True)
class Linear:
    in_features: int
    out_features: int
    has_bias: bool = True


@dataclass(frozen=True)
class BatchNorm:
    channels: int
    eps: float = 1e-5
    momentum: float = 0.1


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    k: int
    stride: int


@dataclass(frozen=True)
class AvgPool:
    k: int
    stride: int


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Add:
    """Elementwise sum of two producers (residual join)."""


LAYER_KINDS = (Conv, Linear, BatchNorm, ReLU, MaxPool, AvgPool, Flatten, Add)


def is_param_layer(spec):
    """Layers subject to Top-K sparsification (conv and linear)."""
    return isinstance(spec, (Conv, Linear))


def layer_kind_name(spec):
    return type(spec).__name__.lower()


def infer_shapes(layers, wiring, input_shape):
    """Output shape of every layer given the per-sample input shape (C,H,W).

    Shapes exclude the batch dimension: rank-3 (C,H,W) for spatial
    tensors, rank-1 (features,) after Flatten/Linear.
    """
    shapes = []
    for idx, (spec, inputs) in enumerate(zip(layers, wiring)):
        src = [input_shape if i < 0 else shapes[i] for i in inputs]
        x = src[0]
        if isinstance(spec, Conv):
            if len(x) != 3 or x[0] != spec.in_channels:
                raise ShapeError(f"layer {idx}: conv expects ({spec.in_channels},H,W), got {x}")
            oh, ow = conv_out_hw(x[1], x[2], spec.kh, spec.kw, spec.stride, spec.padding)
            shapes.append((spec.out_channels, oh, ow))
        elif isinstance(spec, Linear):
            if len(x) != 1 or x[0] != spec.in_features:
                raise ShapeError(f"layer {idx}: linear expects ({spec.in_features},), got {x}")
            shapes.append((spec.out_features,))
        elif isinstance(spec, BatchNorm):
            if len(x) != 3 or x[0] != spec.channels:
                raise ShapeError(f"layer {idx}: batchnorm expects ({spec.channels},H,W), got {x}")
            shapes.append(x)
        elif isinstance(spec, (MaxPool, AvgPool)):
            if len(x) != 3:
                raise ShapeError(f"layer {idx}: pool expects (C,H,W), got {x}")
            oh = (x[1] - spec.k) // spec.stride + 1
            ow = (x[2] - spec.k) // spec.stride + 1
            if oh < 1 or ow < 1:
                raise ShapeError(f"layer {idx}: pool window {spec.k} does not fit {x}")
            shapes.append((x[0], oh, ow))
        elif isinstance(spec, Flatten):
            shapes.append((int(np.prod(x)),))
        elif isinstance(spec, Add):
            if len(src) != 2 or src[0] != src[1]:
                raise ShapeError(f"layer {idx}: add expects two equal shapes, got {src}")
            shapes.append(x)
        elif isinstance(spec, ReLU):
            shapes.append(x)
        else:
            raise TypeError(f"unknown layer spec: {spec!r}")
    return shapes


class Network:
    """Ordered layers with parameter, momentum, and saved-context storage."""

    def __init__(self, layers, input_shape, wiring=None, dtype=np.float32, init_rng=None):
        self.layers = list(layers)
        if wiring is None:
            wiring = [(i - 1,) for i in range(len(self.layers))]
        self.wiring = [tuple(w) for w in wiring]
        if len(self.wiring) != len(self.layers):
            raise ValueError("wiring length does not match layer count")
        for idx, inputs in enumerate(self.wiring):
            if any(i >= idx for i in inputs):
                raise ValueError(f"layer {idx} wired to a non-earlier producer {inputs}")
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self.shapes = infer_shapes(self.layers, self.wiring, self.input_shape)
        self.params = [dict() for _ in self.layers]
        self.buffers = [dict() for _ in self.layers]
        self.momentum = [dict() for _ in self.layers]
        self.saved = [None for _ in self.layers]
        self._init_params(init_rng if init_rng is not None else np.random.default_rng(0))

    def _init_params(self, rng):
        # He-normal fan-in init for conv/linear, unit gamma for BN
        for idx, spec in enumerate(self.layers):
            if isinstance(spec, Conv):
                fan_in = spec.in_channels * spec.kh * spec.kw
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                               size=(spec.out_channels, spec.in_channels, spec.kh, spec.kw))
                self.params[idx]["weight"] = w.astype(self.dtype)
                if spec.has_bias:
                    self.params[idx]["bias"] = np.zeros(spec.out_channels, dtype=self.dtype)
            elif isinstance(spec, Linear):
                w = rng.normal(0.0, np.sqrt(2.0 / spec.in_features),
                               size=(spec.in_features, spec.out_features))
                self.params[idx]["weight"] = w.astype(self.dtype)
                if spec.has_bias:
                    self.params[idx]["bias"] = np.zeros(spec.out_features, dtype=self.dtype)
            elif isinstance(spec, BatchNorm):
                self.params[idx]["gamma"] = np.ones(spec.channels, dtype=self.dtype)
                self.params[idx]["beta"] = np.zeros(spec.channels, dtype=self.dtype)
                self.buffers[idx]["running_mean"] = np.zeros(spec.channels, dtype=self.dtype)
                self.buffers[idx]["running_var"] = np.ones(spec.channels, dtype=self.dtype)
            for name, p in self.params[idx].items():
                self.momentum[idx][name] = np.zeros_like(p)

    def param_layer_indices(self):
        return [i for i, spec in enumerate(self.layers) if is_param_layer(spec)]

    def first_param_layer(self):
        idx = self.param_layer_indices()
        return idx[0] if idx else None

    def last_param_layer(self):
        idx = self.param_layer_indices()
        return idx[-1] if idx else None

    def weight_count(self, idx):
        return int(self.params[idx]["weight"].size) if "weight" in self.params[idx] else 0

    def clear_saved(self):
        self.saved = [None for _ in self.layers]

    def astype(self, dtype):
        """Copy of the network with parameters cast to dtype."""
        clone = Network.__new__(Network)
        clone.layers = list(self.layers)
        clone.wiring = list(self.wiring)
        clone.input_shape = self.input_shape
        clone.dtype = np.dtype(dtype)
        clone.shapes = list(self.shapes)
        clone.params = [{k: v.astype(dtype) for k, v in d.items()} for d in self.params]
        clone.buffers = [{k: v.astype(dtype) for k, v in d.items()} for d in self.buffers]
        clone.momentum = [{k: v.astype(dtype) for k, v in d.items()} for d in self.momentum]
        clone.saved = [None for _ in self.layers]
        return clone


@dataclass
class ArchInfo:
    """A named architecture plus its dataset-facing metadata."""
    name: str
    network: Network
    num_classes: int
    exempt_last_default: bool = False
    extras: dict = field(default_factory=dict)
