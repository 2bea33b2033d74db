"""
Network container, validation and execution.

A network is a sequential list of layers plus optional residual skip edges.
A skip edge ``(src, dst, proj)`` adds the output of layer ``src`` (passed
through the optional 1x1 projection ``proj``) to the input of layer ``dst``::

    input(dst) = output(dst - 1) + proj(output(src))

With ``dst`` pointing at the ReLU that follows a block's last BN, the
addition lands after conv + BN and before the activation.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Tuple, Union

import numpy as np

from .layers import (
    PASSTHROUGH,
    WEIGHTED,
    BatchNorm,
    Conv,
    DecomposedConv,
    Linear,
    backward_layer,
    forward_layer,
    output_shape,
    tag,
)
from .tensor import ShapeError


@dataclass
class SkipEdge:
    src: int
    dst: int
    proj: Optional[Union[Conv, DecomposedConv]] = None


@dataclass
class Network:
    layers: list
    input_shape: Tuple[int, int, int]
    num_classes: int
    skips: List[SkipEdge] = field(default_factory=list)

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Network":
        """Deep copy with every float array cast to ``dtype``."""
        net = self.copy()
        for obj in list(net.layers) + [s.proj for s in net.skips if s.proj is not None]:
            for name, val in vars(obj).items():
                if isinstance(val, np.ndarray) and val.dtype.kind == "f":
                    setattr(obj, name, val.astype(dtype))
        return net

    @property
    def dtype(self):
        for _, arr in iter_arrays(self):
            if arr.dtype.kind == "f":
                return arr.dtype
        return np.dtype(np.float32)

    def sites(self) -> Iterator[Tuple[str, object]]:
        """Weighted layers keyed by site name: ``L<k>`` or ``S<e>`` for a projection."""
        for k, layer in enumerate(self.layers):
            if isinstance(layer, WEIGHTED):
                yield f"L{k}", layer
        for e, skip in enumerate(self.skips):
            if skip.proj is not None:
                yield f"S{e}", skip.proj

    def site(self, key: str):
        if key.startswith("L"):
            return self.layers[int(key[1:])]
        return self.skips[int(key[1:])].proj

    def decomposed(self) -> List[Tuple[str, DecomposedConv]]:
        return [(k, s) for k, s in self.sites() if isinstance(s, DecomposedConv)]


def iter_arrays(net: Network):
    for key, obj in [(f"L{k}", l) for k, l in enumerate(net.layers)] + [
        (f"S{e}", s.proj) for e, s in enumerate(net.skips) if s.proj is not None
    ]:
        for name, val in vars(obj).items():
            if isinstance(val, np.ndarray):
                yield f"{key}.{name}", val


# ---------------------------------------------------------------------------
# shapes and validation


@dataclass
class Diagnostic:
    layer: int
    kind: str
    message: str

    def __str__(self):
        return f"[layer {self.layer}] {self.kind}: {self.message}"


def _skip_geometry_problem(net: Network) -> List[Diagnostic]:
    out = []
    for e, s in enumerate(net.skips):
        if not (0 <= s.src < s.dst - 1) or s.dst >= len(net.layers):
            out.append(Diagnostic(s.dst, "skip-order", f"skip {e} ({s.src}->{s.dst}) is not forward-only"))
    for a in range(len(net.skips)):
        for b in range(len(net.skips)):
            sa, sb = net.skips[a], net.skips[b]
            if sa.src < sb.src < sa.dst < sb.dst:
                out.append(Diagnostic(sb.dst, "skip-crossing", f"skips {a} and {b} cross"))
    return out


def _check_layer(k: int, layer) -> List[Diagnostic]:
    out = []
    if isinstance(layer, Conv):
        w = layer.weight
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            out.append(Diagnostic(k, "weight-shape", f"conv weight must be rank-4 square, got {w.shape}"))
        elif layer.bias.shape != (w.shape[0],):
            out.append(Diagnostic(k, "bias-shape", f"bias {layer.bias.shape} vs {w.shape[0]} outputs"))
    elif isinstance(layer, DecomposedConv):
        d, kk = layer.basis.shape
        if not 1 <= d <= kk:
            out.append(Diagnostic(k, "basis-size", f"d={d} outside [1, {kk}]"))
        if layer.coeffs.ndim != 3 or layer.coeffs.shape[2] != d:
            out.append(Diagnostic(k, "coeff-shape", f"coeffs {layer.coeffs.shape} vs d={d}"))
        elif layer.mask.shape != layer.coeffs.shape:
            out.append(Diagnostic(k, "mask-shape", "mask not congruent to coeffs"))
        elif np.any(layer.coeffs[~layer.mask] != 0):
            out.append(Diagnostic(k, "mask", "nonzero coefficient under a false mask entry"))
        if int(round(np.sqrt(kk))) ** 2 != kk:
            out.append(Diagnostic(k, "basis-size", f"basis width {kk} is not a square kernel"))
    elif isinstance(layer, Linear):
        if layer.weight.ndim != 2:
            out.append(Diagnostic(k, "weight-shape", "linear weight must be rank-2"))
    elif isinstance(layer, BatchNorm):
        if np.any(layer.running_var < 0):
            out.append(Diagnostic(k, "bn-variance", "negative running variance"))
    return out


def infer_shapes(net: Network, strict: bool = True):
    """Return ``(inputs, outputs)``: per-layer input and output shapes (no batch axis).

    With ``strict=False`` mismatches are collected as diagnostics and shape
    propagation continues from the offending layer's declared output.
    """
    diags: List[Diagnostic] = []
    inputs, outputs = [], []
    incoming = {}
    for e, s in enumerate(net.skips):
        incoming.setdefault(s.dst, []).append((e, s))
    prev = tuple(net.input_shape)
    for k, layer in enumerate(net.layers):
        shape = prev
        for e, s in incoming.get(k, []):
            if not 0 <= s.src < k:
                continue
            src_shape = outputs[s.src]
            try:
                if s.proj is not None:
                    src_shape = output_shape(s.proj, src_shape)
            except ShapeError as exc:
                diags.append(Diagnostic(k, "skip-shape", f"skip {e} projection: {exc}"))
                continue
            if src_shape != shape:
                diags.append(
                    Diagnostic(k, "skip-shape", f"skip {e} delivers {src_shape}, layer input is {shape}")
                )
        inputs.append(shape)
        try:
            out = output_shape(layer, shape)
        except ShapeError as exc:
            if strict:
                raise ShapeError(f"layer {k} ({tag(layer)}): {exc}") from exc
            diags.append(Diagnostic(k, "shape-chain", str(exc)))
            out = _declared_output(layer, shape)
        outputs.append(out)
        prev = out
    if strict and diags:
        raise ShapeError("; ".join(map(str, diags)))
    return inputs, outputs, diags


def _declared_output(layer, shape):
    """Best-effort output shape for a layer that rejected its input."""
    if isinstance(layer, (Conv, DecomposedConv)):
        fixed = (layer.in_channels,) + tuple(shape[1:]) if len(shape) == 3 else (layer.in_channels, 1, 1)
        try:
            return output_shape(layer, fixed)
        except ShapeError:
            return (layer.out_channels,) + tuple(shape[1:])
    if isinstance(layer, Linear):
        return (layer.out_features,)
    if isinstance(layer, BatchNorm):
        return (layer.gamma.shape[0],) + tuple(shape[1:])
    return shape


def validate(net: Network) -> List[Diagnostic]:
    """All invariant violations, one diagnostic each; empty for a well-formed net."""
    diags = _skip_geometry_problem(net)
    for k, layer in enumerate(net.layers):
        diags += _check_layer(k, layer)
    for e, s in enumerate(net.skips):
        if s.proj is not None:
            for d in _check_layer(s.dst, s.proj):
                d.message = f"skip {e} projection: {d.message}"
                diags.append(d)
    if diags:
        return diags
    _, outputs, shape_diags = infer_shapes(net, strict=False)
    diags += shape_diags
    if outputs and outputs[-1] != (net.num_classes,):
        diags.append(
            Diagnostic(len(net.layers) - 1, "output-shape", f"logits {outputs[-1]} vs {net.num_classes} classes")
        )
    return diags


# ---------------------------------------------------------------------------
# execution


def execute(net: Network, x: np.ndarray, apply: Callable, keep: bool = False):
    """Run the layer graph with ``apply(site_key, layer, x) -> y`` per layer.

    Returns the final output and, if ``keep``, the list of per-layer outputs.
    """
    incoming = {}
    for e, s in enumerate(net.skips):
        incoming.setdefault(s.dst, []).append((e, s))
    needed = {s.src for s in net.skips}
    outputs = {}
    kept = []
    h = x
    for k, layer in enumerate(net.layers):
        for e, s in incoming.get(k, []):
            src = outputs[s.src]
            h = h + (apply(f"S{e}", s.proj, src) if s.proj is not None else src)
        h = apply(f"L{k}", layer, h)
        if k in needed:
            outputs[k] = h
        if keep:
            kept.append(h)
    return h, kept


@dataclass
class Trace:
    """Activations and layer caches retained by a training-mode forward."""

    caches: dict
    outputs: list
    logits: np.ndarray


def forward(net: Network, batch: np.ndarray, training: bool = False, keep: bool = False):
    """Evaluate ``net`` on an NCHW batch and return ``(logits, activations)``.

    ``activations`` is a :class:`Trace` holding per-layer outputs and the
    caches :func:`backward` needs; it is ``None`` unless ``keep`` or
    ``training`` is set. Decomposed layers run on their reconstructed weight.
    """
    if tuple(batch.shape[1:]) != tuple(net.input_shape):
        raise ShapeError(f"batch shape {batch.shape[1:]} != network input {tuple(net.input_shape)}")
    caches = {}
    record = keep or training

    def apply(key, layer, h):
        y, cache = forward_layer(layer, h, training)
        if record:
            caches[key] = cache
        return y

    logits, outs = execute(net, batch, apply, keep=record)
    if not record:
        return logits, None
    return logits, Trace(caches=caches, outputs=outs, logits=logits)


def backward(net: Network, trace: Trace, grad_logits: np.ndarray):
    """Backpropagate ``grad_logits``; returns ``{site_key: {param: grad}}``.

    Decomposed sites report the gradient with respect to the reconstructed
    weight under ``"theta"``; the trainer maps it onto basis and coefficients.
    """
    grads = {}
    incoming = {}
    for e, s in enumerate(net.skips):
        incoming.setdefault(s.dst, []).append((e, s))
    pending = {}  # gradient w.r.t. output of layer k, accumulated from skips
    g = grad_logits
    for k in range(len(net.layers) - 1, -1, -1):
        if k in pending:
            g = g + pending.pop(k)
        layer = net.layers[k]
        key = f"L{k}"
        g, pg = backward_layer(layer, trace.caches[key], g)
        if pg:
            grads[key] = pg
        for e, s in incoming.get(k, []):
            gs = g
            if s.proj is not None:
                gs, pp = backward_layer(s.proj, trace.caches[f"S{e}"], g)
                grads[f"S{e}"] = pp
            pending[s.src] = pending[s.src] + gs if s.src in pending else gs
    return grads


# ---------------------------------------------------------------------------
# construction helpers


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def make_conv(rng, c_in, c_out, k, stride=1, padding=None, dtype=np.float32) -> Conv:
    if padding is None:
        padding = k // 2
    return Conv(
        weight=he_uniform(rng, (c_out, c_in, k, k), c_in * k * k, dtype),
        bias=np.zeros(c_out, dtype),
        stride=stride,
        padding=padding,
    )


def make_linear(rng, n_in, n_out, dtype=np.float32) -> Linear:
    return Linear(weight=he_uniform(rng, (n_out, n_in), n_in, dtype), bias=np.zeros(n_out, dtype))
