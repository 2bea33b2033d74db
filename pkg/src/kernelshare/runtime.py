"""
Two-stage inference for decomposed layers, plus MAC/parameter accounting
and latency measurement.

Stage 1 convolves every input channel with each of the layer's d basis
kernels, materialising c_in*d planes (plane ``j*d + m`` is channel j under
kernel m). Stage 2 forms each output channel as a sparse weighted sum of
those planes, so its cost follows the number of stored coefficients.
"""

from __future__ import annotations

import csv
import json
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy
import scipy.sparse as sp

from .graph import Network, execute, infer_shapes, validate
from .layers import Conv, DecomposedConv, Linear, BatchNorm, forward_layer
from .tensor import ShapeError, conv2d, output_extent


# ---------------------------------------------------------------------------
# sparse coefficients


@dataclass(frozen=True)
class CsrCoefficients:
    """Row ``i`` lists the nonzero ``A[i, j, m]`` under column ``j*d + m``."""

    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    dims: Tuple[int, int, int]

    @classmethod
    def from_dense(cls, coeffs: np.ndarray) -> "CsrCoefficients":
        c_out, c_in, d = coeffs.shape
        flat = coeffs.reshape(c_out, c_in * d)
        rows, cols = np.nonzero(flat)  # row-major, so columns ascend within a row
        indptr = np.zeros(c_out + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=c_out), out=indptr[1:])
        return cls(indptr, cols.astype(np.int64), flat[rows, cols].copy(), (c_out, c_in, d))

    @property
    def nnz(self) -> int:
        return int(self.data.size)

    def to_dense(self) -> np.ndarray:
        c_out, c_in, d = self.dims
        out = np.zeros((c_out, c_in * d), dtype=self.data.dtype)
        rows = np.repeat(np.arange(c_out), np.diff(self.indptr))
        out[rows, self.indices] = self.data
        return out.reshape(self.dims)

    def to_scipy(self) -> sp.csr_matrix:
        c_out, c_in, d = self.dims
        return sp.csr_matrix((self.data, self.indices, self.indptr), shape=(c_out, c_in * d))


def stage1(x: np.ndarray, basis: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Depthwise pass: (N, c_in, H, W) -> (N, c_in*d, H', W')."""
    if x.ndim != 4:
        raise ShapeError(f"stage1 expects NCHW input, got {x.shape}")
    d, kk = basis.shape
    k = int(round(np.sqrt(kk)))
    if k * k != kk:
        raise ShapeError(f"basis width {kk} is not a square kernel")
    n, c_in, h, w = x.shape
    ho, wo = output_extent(h, k, stride, padding), output_extent(w, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    # taps[b, t] holds the input pixels seen by kernel tap t, per (sample, channel)
    taps = np.empty((n * c_in, kk, ho, wo), dtype=x.dtype)
    xp = xp.reshape(n * c_in, h + 2 * padding, w + 2 * padding)
    for t in range(kk):
        kh, kw = divmod(t, k)
        taps[:, t] = xp[:, kh:kh + stride * ho:stride, kw:kw + stride * wo:stride]
    planes = np.matmul(basis.astype(x.dtype, copy=False), taps.reshape(n * c_in, kk, ho * wo))
    return planes.reshape(n, c_in * d, ho, wo)


def stage2(inter: np.ndarray, coeffs: CsrCoefficients, bias: Optional[np.ndarray] = None,
           matrix: Optional[sp.csr_matrix] = None) -> np.ndarray:
    """Sparse mix: output channel i = sum of ``val * plane[col]`` over row i, plus bias."""
    c_out, c_in, d = coeffs.dims
    if inter.ndim != 4 or inter.shape[1] != c_in * d:
        raise ShapeError(f"intermediate has {inter.shape[1] if inter.ndim == 4 else inter.shape} planes, "
                         f"coefficients expect {c_in * d}")
    if coeffs.nnz and (coeffs.indices.min() < 0 or coeffs.indices.max() >= c_in * d):
        raise IndexError("coefficient column index out of range")
    mat = coeffs.to_scipy() if matrix is None else matrix
    n, _, ho, wo = inter.shape
    flat = inter.reshape(n, c_in * d, ho * wo)
    out = np.empty((n, c_out, ho * wo), dtype=np.result_type(inter, coeffs.data))
    for b in range(n):
        out[b] = mat @ flat[b]
    if bias is not None:
        out += bias[None, :, None]
    return out.reshape(n, c_out, ho, wo)


# ---------------------------------------------------------------------------
# compiled model


@dataclass(frozen=True)
class CompiledLayer:
    basis: np.ndarray
    coeffs: CsrCoefficients
    matrix: sp.csr_matrix
    bias: np.ndarray
    stride: int
    padding: int


class CompiledSparseModel:
    """Read-only network whose decomposed layers run in two stages."""

    def __init__(self, net: Network, layers: Dict[str, CompiledLayer]):
        self._net = net
        self._layers = layers
        self._dense = {key: _freeze(layer.reconstruct()) for key, layer in net.decomposed()}

    @property
    def net(self) -> Network:
        return self._net

    @property
    def layers(self) -> Dict[str, CompiledLayer]:
        return dict(self._layers)

    @property
    def input_shape(self):
        return self._net.input_shape


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


def compile(net: Network) -> CompiledSparseModel:
    problems = validate(net)
    if problems:
        raise ShapeError("cannot compile invalid network: " + "; ".join(map(str, problems)))
    net = net.copy()
    for _, layer in net.sites():
        for name, value in vars(layer).items():
            if isinstance(value, np.ndarray):
                setattr(layer, name, _freeze(value))
    for layer in net.layers:
        if isinstance(layer, BatchNorm):
            for name in ("gamma", "beta", "running_mean", "running_var"):
                setattr(layer, name, _freeze(getattr(layer, name)))
    compiled = {}
    for key, layer in net.decomposed():
        csr = CsrCoefficients.from_dense(np.where(layer.mask, layer.coeffs, 0))
        compiled[key] = CompiledLayer(layer.basis, csr, csr.to_scipy(), layer.bias, layer.stride, layer.padding)
    return CompiledSparseModel(net, compiled)


class _Probe:
    """Collects per-stage wall time and the largest live-tensor footprint."""

    def __init__(self):
        self.stage1 = 0.0
        self.stage2 = 0.0
        self.peak_bytes = 0

    def live(self, *arrays):
        self.peak_bytes = max(self.peak_bytes, sum(a.nbytes for a in arrays))


def infer(model: CompiledSparseModel, batch: np.ndarray, probe: Optional[_Probe] = None) -> np.ndarray:
    """Logits computed with the two-stage path for every decomposed layer."""
    compiled = model._layers

    def apply(key, layer, h):
        c = compiled.get(key)
        if c is None:
            y = forward_layer(layer, h)[0]
            if probe:
                probe.live(h, y)
            return y
        t0 = time.perf_counter()
        inter = stage1(h, c.basis, c.stride, c.padding)
        t1 = time.perf_counter()
        y = stage2(inter, c.coeffs, c.bias, c.matrix)
        if probe:
            probe.stage1 += t1 - t0
            probe.stage2 += time.perf_counter() - t1
            probe.live(h, inter, y)
        return y

    return execute(model.net, batch.astype(model.net.dtype, copy=False), apply)[0]


def dense_infer(model: CompiledSparseModel, batch: np.ndarray, probe: Optional[_Probe] = None) -> np.ndarray:
    """Baseline: reconstruct every decomposed layer's kernels and run a dense conv."""
    dense = model._dense

    def apply(key, layer, h):
        if key in dense:
            y = conv2d(h, dense[key], layer.bias, layer.stride, layer.padding)
        else:
            y = forward_layer(layer, h)[0]
        if probe:
            probe.live(h, y)
        return y

    return execute(model.net, batch.astype(model.net.dtype, copy=False), apply)[0]


# ---------------------------------------------------------------------------
# MAC / parameter accounting


@dataclass
class LayerFlops:
    layer: str
    kind: str
    dense_macs: int
    stage1_macs: int = 0
    stage2_macs: int = 0
    params: int = 0
    weight_params: int = 0

    @property
    def two_stage_total(self) -> int:
        return self.stage1_macs + self.stage2_macs

    @property
    def effective_macs(self) -> int:
        return self.two_stage_total if self.kind == "decomposed" else self.dense_macs


@dataclass
class FlopLedger:
    """Per-layer MAC counts; one multiply-accumulate is one unit.

    ``params_total`` counts every stored parameter (basis, nonzero
    coefficients, dense weights, biases, BN scale and shift). ``weight_params``
    counts only convolution weights: basis plus nonzero coefficients for
    decomposed layers, full kernels for dense ones.
    """

    layers: List[LayerFlops] = field(default_factory=list)
    bn_params: int = 0

    @property
    def dense_macs(self) -> int:
        return sum(r.dense_macs for r in self.layers)

    @property
    def stage1_macs(self) -> int:
        return sum(r.stage1_macs for r in self.layers)

    @property
    def stage2_macs(self) -> int:
        return sum(r.stage2_macs for r in self.layers)

    @property
    def two_stage_total(self) -> int:
        return self.stage1_macs + self.stage2_macs

    @property
    def effective_macs(self) -> int:
        return sum(r.effective_macs for r in self.layers)

    @property
    def params_total(self) -> int:
        return sum(r.params for r in self.layers) + self.bn_params

    @property
    def weight_params(self) -> int:
        return sum(r.weight_params for r in self.layers)

    def to_dict(self) -> dict:
        rows = [{**asdict(r), "two_stage_total": r.two_stage_total, "effective_macs": r.effective_macs}
                for r in self.layers]
        return {
            "layers": rows,
            "totals": {
                "dense_macs": self.dense_macs,
                "stage1_macs": self.stage1_macs,
                "stage2_macs": self.stage2_macs,
                "two_stage_total": self.two_stage_total,
                "effective_macs": self.effective_macs,
                "params_total": self.params_total,
                "weight_params": self.weight_params,
            },
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def count_flops(net, input_shape: Optional[Sequence[int]] = None) -> FlopLedger:
    if isinstance(net, CompiledSparseModel):
        net = net.net
    if input_shape is not None:
        net = Network(net.layers, tuple(input_shape), net.num_classes, net.skips)
    inputs, outputs, diags = infer_shapes(net, strict=False)
    if diags:
        raise ShapeError("unresolved shapes: " + "; ".join(map(str, diags)))
    # projection sites read the source layer's output shape
    shapes = {f"L{k}": (inputs[k], outputs[k]) for k in range(len(net.layers))}
    for e, s in enumerate(net.skips):
        if s.proj is not None:
            src = outputs[s.src]
            shapes[f"S{e}"] = (src, outputs[s.dst - 1])

    ledger = FlopLedger()
    for key, layer in net.sites():
        shape_in, shape_out = shapes[key]
        if isinstance(layer, Linear):
            macs = layer.in_features * layer.out_features
            ledger.layers.append(LayerFlops(key, "linear", macs, params=layer.weight.size + layer.bias.size))
            continue
        hw = int(shape_out[1] * shape_out[2])
        k = layer.kernel_size
        c_out, c_in = layer.out_channels, layer.in_channels
        dense = c_out * c_in * k * k * hw
        if isinstance(layer, DecomposedConv):
            nnz = int(np.count_nonzero(np.where(layer.mask, layer.coeffs, 0)))
            stored = layer.basis.size + nnz
            ledger.layers.append(LayerFlops(
                key, "decomposed", dense,
                stage1_macs=c_in * layer.d * k * k * hw, stage2_macs=nnz * hw,
                params=stored + layer.bias.size, weight_params=stored,
            ))
        else:
            ledger.layers.append(LayerFlops(key, "conv", dense, params=layer.weight.size + layer.bias.size,
                                            weight_params=layer.weight.size))
    ledger.bn_params = sum(2 * l.gamma.size for l in net.layers if isinstance(l, BatchNorm))
    return ledger


# ---------------------------------------------------------------------------
# benchmarking

BENCH_COLUMNS = ["variant", "batch", "median_ms", "p95_ms", "stage1_ms", "stage2_ms", "peak_mb"]


@dataclass
class VariantTiming:
    variant: str
    batch: int
    samples_ms: List[float]
    stage1_ms: float
    stage2_ms: float
    peak_mb: float

    @property
    def median_ms(self) -> float:
        return float(np.median(self.samples_ms))

    @property
    def p95_ms(self) -> float:
        return float(np.percentile(self.samples_ms, 95))

    def row(self) -> dict:
        return {"variant": self.variant, "batch": self.batch, "median_ms": self.median_ms,
                "p95_ms": self.p95_ms, "stage1_ms": self.stage1_ms, "stage2_ms": self.stage2_ms,
                "peak_mb": self.peak_mb}


@dataclass
class BenchmarkResult:
    variants: List[VariantTiming]
    machine: dict

    def variant(self, name: str) -> VariantTiming:
        return next(v for v in self.variants if v.variant == name)

    @property
    def speedup(self) -> float:
        return self.variant("dense").median_ms / self.variant("two-stage").median_ms

    def to_dict(self) -> dict:
        return {
            "machine": self.machine,
            "variants": [{**v.row(), "samples_ms": v.samples_ms} for v in self.variants],
            "speedup": self.speedup,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
            writer.writeheader()
            for v in self.variants:
                writer.writerow(v.row())


def machine_description() -> dict:
    try:
        from threadpoolctl import threadpool_info
        pools = [{"api": p.get("internal_api"), "threads": p.get("num_threads")} for p in threadpool_info()]
    except ImportError:  # pragma: no cover
        pools = []
    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor(),
        "cpu_count": os.cpu_count(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "thread_pools": pools,
    }


def _time_variant(name, fn, model, x, repetitions, warmup):
    for _ in range(warmup):
        fn(model, x)
    samples, s1, s2 = [], [], []
    peak = 0
    for _ in range(repetitions):
        probe = _Probe()
        t0 = time.perf_counter()
        fn(model, x, probe)
        samples.append(1e3 * (time.perf_counter() - t0))
        s1.append(1e3 * probe.stage1)
        s2.append(1e3 * probe.stage2)
        peak = max(peak, probe.peak_bytes)
    return VariantTiming(name, len(x), samples, float(np.median(s1)), float(np.median(s2)), peak / 2**20)


def benchmark(model, batch_size: int = 8, repetitions: int = 20, warmup: int = 2, seed: int = 0) -> BenchmarkResult:
    """Median/p95 latency of the dense and two-stage paths on one random batch."""
    if repetitions < 5:
        raise ValueError("repetitions must be >= 5")
    if not isinstance(model, CompiledSparseModel):
        model = compile(model)
    x = np.random.default_rng(seed).standard_normal((batch_size,) + tuple(model.input_shape))
    x = x.astype(model.net.dtype)
    variants = [
        _time_variant("dense", dense_infer, model, x, repetitions, warmup),
        _time_variant("two-stage", infer, model, x, repetitions, warmup),
    ]
    return BenchmarkResult(variants, machine_description())
