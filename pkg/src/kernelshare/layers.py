"""Layer specifications and their forward/backward kernels."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import ShapeError, conv2d, conv2d_grads, output_extent


@dataclass
class Conv:
    weight: np.ndarray  # (c_out, c_in, k, k)
    bias: np.ndarray    # (c_out,)
    stride: int = 1
    padding: int = 0

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


@dataclass
class DecomposedConv:
    """Convolution whose kernels are ``coeffs @ basis`` over a shared per-layer basis.

    ``basis`` holds one flattened k*k kernel per row. ``coeffs[i, j]`` mixes the
    basis rows into the kernel connecting input channel j to output channel i.
    The last ``n_fixed`` basis rows carry frozen coefficients (the mean kernel of
    a centered decomposition) and are never trained or pruned.
    """

    basis: np.ndarray   # (d, k*k)
    coeffs: np.ndarray  # (c_out, c_in, d)
    bias: np.ndarray    # (c_out,)
    stride: int = 1
    padding: int = 0
    mask: Optional[np.ndarray] = None  # bool, congruent to coeffs
    n_fixed: int = 0

    def __post_init__(self):
        if self.mask is None:
            self.mask = np.ones(self.coeffs.shape, dtype=bool)

    @property
    def d(self) -> int:
        return self.basis.shape[0]

    @property
    def kernel_size(self) -> int:
        return int(round(np.sqrt(self.basis.shape[1])))

    @property
    def in_channels(self) -> int:
        return self.coeffs.shape[1]

    @property
    def out_channels(self) -> int:
        return self.coeffs.shape[0]

    def reconstruct(self) -> np.ndarray:
        k = self.kernel_size
        c_out, c_in, d = self.coeffs.shape
        flat = self.coeffs.reshape(-1, d) @ self.basis
        return flat.reshape(c_out, c_in, k, k)


@dataclass
class Linear:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]


@dataclass
class ReLU:
    pass


@dataclass
class MaxPool:
    window: int = 2
    stride: int = 2


@dataclass
class AvgPool:
    window: int = 2
    stride: int = 2


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNorm":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
        )


@dataclass
class GlobalAvgPool:
    pass


WEIGHTED = (Conv, DecomposedConv, Linear)
PASSTHROUGH = (ReLU, MaxPool, AvgPool, BatchNorm, GlobalAvgPool)

# variant tag <-> class, used by serialization and diagnostics
LAYER_TYPES = {
    "Conv": Conv,
    "DecomposedConv": DecomposedConv,
    "Linear": Linear,
    "ReLU": ReLU,
    "MaxPool": MaxPool,
    "AvgPool": AvgPool,
    "BatchNorm": BatchNorm,
    "GlobalAvgPool": GlobalAvgPool,
}


def tag(layer) -> str:
    return type(layer).__name__


def output_shape(layer, shape: tuple) -> tuple:
    """Shape (without batch) produced by ``layer`` for input ``shape``."""
    if isinstance(layer, (Conv, DecomposedConv)):
        if len(shape) != 3:
            raise ShapeError(f"{tag(layer)} needs a CHW input, got {shape}")
        c, h, w = shape
        if c != layer.in_channels:
            raise ShapeError(f"{tag(layer)} expects {layer.in_channels} input channels, got {c}")
        k = layer.kernel_size
        return (
            layer.out_channels,
            output_extent(h, k, layer.stride, layer.padding),
            output_extent(w, k, layer.stride, layer.padding),
        )
    if isinstance(layer, Linear):
        n_in = int(np.prod(shape))
        if n_in != layer.in_features:
            raise ShapeError(f"Linear expects {layer.in_features} features, got {n_in}")
        return (layer.out_features,)
    if isinstance(layer, (MaxPool, AvgPool)):
        c, h, w = shape
        return (
            c,
            output_extent(h, layer.window, layer.stride, 0),
            output_extent(w, layer.window, layer.stride, 0),
        )
    if isinstance(layer, GlobalAvgPool):
        return (shape[0],)
    if isinstance(layer, BatchNorm):
        if shape[0] != layer.gamma.shape[0]:
            raise ShapeError(f"BatchNorm has {layer.gamma.shape[0]} channels, input has {shape[0]}")
        return shape
    return shape


# ---------------------------------------------------------------------------
# per-layer kernels
#
# forward_layer returns (output, cache); backward_layer consumes the cache and
# returns (grad_input, {param_name: grad}). For DecomposedConv the returned
# parameter gradient is with respect to the reconstructed weight ("theta").


def _pool_windows(x, window, stride):
    n, c, h, w = x.shape
    ho = output_extent(h, window, stride, 0)
    wo = output_extent(w, window, stride, 0)
    win = np.lib.stride_tricks.sliding_window_view(x, (window, window), axis=(2, 3))
    return win[:, :, ::stride, ::stride][:, :, :ho, :wo], ho, wo


def _bn_axes(x):
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bn_view(v, x):
    return v if x.ndim == 2 else v[None, :, None, None]


def forward_layer(layer, x: np.ndarray, training: bool = False):
    if isinstance(layer, Conv):
        return conv2d(x, layer.weight, layer.bias, layer.stride, layer.padding), (x, layer.weight)
    if isinstance(layer, DecomposedConv):
        theta = layer.reconstruct()
        return conv2d(x, theta, layer.bias, layer.stride, layer.padding), (x, theta)
    if isinstance(layer, Linear):
        flat = x.reshape(x.shape[0], -1)
        return flat @ layer.weight.T + layer.bias, (x.shape, flat)
    if isinstance(layer, ReLU):
        return np.maximum(x, 0), x > 0
    if isinstance(layer, MaxPool):
        win, ho, wo = _pool_windows(x, layer.window, layer.stride)
        flat = win.reshape(*win.shape[:4], -1)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return out, (x.shape, arg)
    if isinstance(layer, AvgPool):
        win, _, _ = _pool_windows(x, layer.window, layer.stride)
        return win.mean(axis=(-2, -1)), x.shape
    if isinstance(layer, GlobalAvgPool):
        return x.mean(axis=(2, 3)), x.shape
    if isinstance(layer, BatchNorm):
        axes = _bn_axes(x)
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            count = x.size // x.shape[1]
            unbiased = var * (count / max(count - 1, 1))
            m = layer.momentum
            layer.running_mean = ((1 - m) * layer.running_mean + m * mean).astype(layer.running_mean.dtype)
            layer.running_var = ((1 - m) * layer.running_var + m * unbiased).astype(layer.running_var.dtype)
        else:
            mean, var = layer.running_mean, layer.running_var
        inv = 1.0 / np.sqrt(var + layer.eps)
        xhat = (x - _bn_view(mean, x)) * _bn_view(inv, x)
        out = xhat * _bn_view(layer.gamma, x) + _bn_view(layer.beta, x)
        return out.astype(x.dtype, copy=False), (xhat, inv, training)
    raise TypeError(f"unsupported layer {layer!r}")


def backward_layer(layer, cache, grad: np.ndarray):
    if isinstance(layer, (Conv, DecomposedConv)):
        x, weight = cache
        gx, gw, gb = conv2d_grads(x, weight, grad, layer.stride, layer.padding)
        key = "weight" if isinstance(layer, Conv) else "theta"
        return gx, {key: gw, "bias": gb}
    if isinstance(layer, Linear):
        shape, flat = cache
        gx = (grad @ layer.weight).reshape(shape)
        return gx, {"weight": grad.T @ flat, "bias": grad.sum(axis=0)}
    if isinstance(layer, ReLU):
        return grad * cache, {}
    if isinstance(layer, MaxPool):
        shape, arg = cache
        n, c, h, w = shape
        win = layer.window
        ho, wo = arg.shape[2], arg.shape[3]
        gx = np.zeros(shape, dtype=grad.dtype)
        for kh in range(win):
            for kw in range(win):
                hit = arg == kh * win + kw
                gx[:, :, kh:kh + layer.stride * ho:layer.stride, kw:kw + layer.stride * wo:layer.stride] += grad * hit
        return gx, {}
    if isinstance(layer, AvgPool):
        shape = cache
        win = layer.window
        ho, wo = grad.shape[2], grad.shape[3]
        gx = np.zeros(shape, dtype=grad.dtype)
        share = grad / (win * win)
        for kh in range(win):
            for kw in range(win):
                gx[:, :, kh:kh + layer.stride * ho:layer.stride, kw:kw + layer.stride * wo:layer.stride] += share
        return gx, {}
    if isinstance(layer, GlobalAvgPool):
        n, c, h, w = cache
        return np.broadcast_to(grad[:, :, None, None] / (h * w), cache).astype(grad.dtype), {}
    if isinstance(layer, BatchNorm):
        xhat, inv, training = cache
        axes = _bn_axes(grad)
        g_gamma = (grad * xhat).sum(axis=axes)
        g_beta = grad.sum(axis=axes)
        gxhat = grad * _bn_view(layer.gamma, grad)
        if training:
            count = grad.size // grad.shape[1]
            gx = (
                gxhat
                - _bn_view(gxhat.sum(axis=axes) / count, grad)
                - xhat * _bn_view((gxhat * xhat).sum(axis=axes) / count, grad)
            ) * _bn_view(inv, grad)
        else:
            gx = gxhat * _bn_view(inv, grad)
        return gx.astype(grad.dtype, copy=False), {"gamma": g_gamma, "beta": g_beta}
    raise TypeError(f"unsupported layer {layer!r}")
