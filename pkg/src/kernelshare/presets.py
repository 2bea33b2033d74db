"""Named architectures: ``toy-cnn``, ``vgg16-cifar``, ``resnet18-cifar``, ``resnet56-cifar``."""

from __future__ import annotations

import numpy as np

from .graph import Network, SkipEdge, make_conv, make_linear
from .layers import BatchNorm, GlobalAvgPool, MaxPool, ReLU

VGG16_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]


def _conv_bn_relu(rng, c_in, c_out, dtype, stride=1):
    return [make_conv(rng, c_in, c_out, 3, stride=stride, dtype=dtype), BatchNorm.fresh(c_out, dtype), ReLU()]


def toy_cnn(seed=0, input_shape=(3, 8, 8), num_classes=3, widths=(16, 32, 32, 64), dtype=np.float32) -> Network:
    """Four 3x3 conv blocks with a max-pool after the second, then GAP + linear."""
    rng = np.random.default_rng(seed)
    layers = []
    c = input_shape[0]
    for i, w in enumerate(widths):
        layers += _conv_bn_relu(rng, c, w, dtype)
        if i == 1:
            layers.append(MaxPool(2, 2))
        c = w
    layers += [GlobalAvgPool(), make_linear(rng, c, num_classes, dtype)]
    return Network(layers=layers, input_shape=tuple(input_shape), num_classes=num_classes)


def vgg16_cifar(seed=0, num_classes=10, dtype=np.float32, widths=None) -> Network:
    """VGG16 variant for 32x32 inputs: 13 conv-BN-ReLU layers, 5 max-pools, one linear.

    ``widths`` optionally overrides the 13 conv output widths.
    """
    rng = np.random.default_rng(seed)
    cfg = list(VGG16_CFG)
    if widths is not None:
        it = iter(widths)
        cfg = [v if v == "M" else next(it) for v in cfg]
    layers, c = [], 3
    for v in cfg:
        if v == "M":
            layers.append(MaxPool(2, 2))
        else:
            layers += _conv_bn_relu(rng, c, v, dtype)
            c = v
    layers.append(make_linear(rng, c, num_classes, dtype))
    return Network(layers=layers, input_shape=(3, 32, 32), num_classes=num_classes)


def _resnet(rng, stages, dtype, num_classes, stem=16):
    layers = _conv_bn_relu(rng, 3, stem, dtype)
    skips = []
    c = stem
    for width, blocks, stride in stages:
        for b in range(blocks):
            s = stride if b == 0 else 1
            src = len(layers) - 1
            layers += _conv_bn_relu(rng, c, width, dtype, stride=s)
            layers += [make_conv(rng, width, width, 3, dtype=dtype), BatchNorm.fresh(width, dtype), ReLU()]
            proj = None
            if s != 1 or c != width:
                proj = make_conv(rng, c, width, 1, stride=s, padding=0, dtype=dtype)
            skips.append(SkipEdge(src=src, dst=len(layers) - 1, proj=proj))
            c = width
    layers += [GlobalAvgPool(), make_linear(rng, c, num_classes, dtype)]
    return Network(layers=layers, input_shape=(3, 32, 32), num_classes=num_classes, skips=skips)


def resnet18_cifar(seed=0, num_classes=10, dtype=np.float32) -> Network:
    rng = np.random.default_rng(seed)
    return _resnet(rng, [(64, 2, 1), (128, 2, 2), (256, 2, 2), (512, 2, 2)], dtype, num_classes, stem=64)


def resnet56_cifar(seed=0, num_classes=10, dtype=np.float32) -> Network:
    rng = np.random.default_rng(seed)
    return _resnet(rng, [(16, 9, 1), (32, 9, 2), (64, 9, 2)], dtype, num_classes, stem=16)


PRESETS = {
    "toy-cnn": toy_cnn,
    "vgg16-cifar": vgg16_cifar,
    "resnet18-cifar": resnet18_cifar,
    "resnet56-cifar": resnet56_cifar,
}


def build(name: str, seed: int = 0, **kwargs) -> Network:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown architecture preset {name!r}; choose from {sorted(PRESETS)}") from None
    return factory(seed=seed, **kwargs)
