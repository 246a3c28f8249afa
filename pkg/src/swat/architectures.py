"""Built-in named architectures.

The benchmark set is fixed: a small MNIST CNN for desk-scale runs plus
the CIFAR variants of ResNet-18, VGG-16, and WRN-16-8 following the
canonical published definitions. Conv layers carry no bias (each is
followed by batchnorm except in tiny heads where a linear bias exists).
"""

import numpy as np

from .network import (Add, ArchInfo, AvgPool, BatchNorm, Conv, Flatten,
                      Linear, MaxPool, Network, ReLU)


class _Builder:
    def __init__(self):
        self.layers = []
        self.wiring = []

    def add(self, spec, src=None):
        if src is None:
            src = (len(self.layers) - 1,)
        elif isinstance(src, int):
            src = (src,)
        self.layers.append(spec)
        self.wiring.append(tuple(src))
        return len(self.layers) - 1

    def conv_bn_relu(self, in_c, out_c, k=3, stride=1, pad=1, src=None):
        self.add(Conv(out_c, in_c, k, k, stride, pad), src)
        self.add(BatchNorm(out_c))
        return self.add(ReLU())


def _tiny_cnn():
    b = _Builder()
    b.conv_bn_relu(1, 8)
    b.add(MaxPool(2, 2))
    b.conv_bn_relu(8, 16)
    b.add(MaxPool(2, 2))
    b.add(Flatten())
    b.add(Linear(16 * 7 * 7, 64))
    b.add(ReLU())
    b.add(Linear(64, 10))
    return b, (1, 28, 28)


def _basic_block(b, in_c, out_c, stride):
    # post-activation residual block (ResNet-18 style)
    entry = len(b.layers) - 1
    b.add(Conv(out_c, in_c, 3, 3, stride, 1), entry)
    b.add(BatchNorm(out_c))
    b.add(ReLU())
    b.add(Conv(out_c, out_c, 3, 3, 1, 1))
    main = b.add(BatchNorm(out_c))
    if stride != 1 or in_c != out_c:
        b.add(Conv(out_c, in_c, 1, 1, stride, 0), entry)
        skip = b.add(BatchNorm(out_c))
    else:
        skip = entry
    b.add(Add(), (main, skip))
    b.add(ReLU())


def _resnet18_cifar():
    b = _Builder()
    b.conv_bn_relu(3, 64)
    widths = [64, 128, 256, 512]
    in_c = 64
    for stage, out_c in enumerate(widths):
        for block in range(2):
            stride = 2 if (stage > 0 and block == 0) else 1
            _basic_block(b, in_c, out_c, stride)
            in_c = out_c
    b.add(AvgPool(4, 4))
    b.add(Flatten())
    b.add(Linear(512, 10))
    return b, (3, 32, 32)


def _vgg16_cifar():
    cfg = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M",
           512, 512, 512, "M", 512, 512, 512, "M"]
    b = _Builder()
    in_c = 3
    for v in cfg:
        if v == "M":
            b.add(MaxPool(2, 2))
        else:
            b.conv_bn_relu(in_c, v)
            in_c = v
    b.add(Flatten())
    b.add(Linear(512, 10))
    return b, (3, 32, 32)


def _wide_block(b, in_c, out_c, stride):
    # pre-activation block (WRN style); projection taken after BN-ReLU
    entry = len(b.layers) - 1
    b.add(BatchNorm(in_c), entry)
    act = b.add(ReLU())
    b.add(Conv(out_c, in_c, 3, 3, stride, 1), act)
    b.add(BatchNorm(out_c))
    b.add(ReLU())
    main = b.add(Conv(out_c, out_c, 3, 3, 1, 1))
    if stride != 1 or in_c != out_c:
        skip = b.add(Conv(out_c, in_c, 1, 1, stride, 0), act)
    else:
        skip = entry
    b.add(Add(), (main, skip))


def _wrn_16_8():
    b = _Builder()
    b.add(Conv(16, 3, 3, 3, 1, 1), -1)
    widths = [128, 256, 512]
    in_c = 16
    for stage, out_c in enumerate(widths):
        for block in range(2):
            stride = 2 if (stage > 0 and block == 0) else 1
            _wide_block(b, in_c, out_c, stride)
            in_c = out_c
    b.add(BatchNorm(512))
    b.add(ReLU())
    b.add(AvgPool(8, 8))
    b.add(Flatten())
    b.add(Linear(512, 10))
    return b, (3, 32, 32)


_ARCHS = {
    "tiny-cnn": (_tiny_cnn, "mnist", False),
    "resnet18-cifar": (_resnet18_cifar, "cifar10", False),
    "vgg16-cifar": (_vgg16_cifar, "cifar10", False),
    # WRN exempts first and last layer from sparsification by default
    "wrn-16-8": (_wrn_16_8, "cifar10", True),
}


def arch_names():
    return sorted(_ARCHS)


def default_dataset(name):
    if name not in _ARCHS:
        raise ValueError(f"unknown architecture '{name}' (choose from {arch_names()})")
    return _ARCHS[name][1]


def build_network(name, dtype=np.float32, seed=0):
    if name not in _ARCHS:
        raise ValueError(f"unknown architecture '{name}' (choose from {arch_names()})")
    builder_fn, _, exempt_last = _ARCHS[name]
    b, input_shape = builder_fn()
    net = Network(b.layers, input_shape, wiring=b.wiring, dtype=dtype,
                  init_rng=np.random.default_rng([seed, 0]))
    return ArchInfo(name=name, network=net, num_classes=10,
                    exempt_last_default=exempt_last)
