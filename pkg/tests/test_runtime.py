import csv
import json

import numpy as np
import pytest

from kernelshare import presets
from kernelshare.decompose import decompose_network
from kernelshare.graph import Network, SkipEdge, forward
from kernelshare.layers import BatchNorm, Conv, DecomposedConv, GlobalAvgPool, Linear, ReLU
from kernelshare.prune import prune
from kernelshare.runtime import (
    BENCH_COLUMNS, BenchmarkResult, CsrCoefficients, VariantTiming, benchmark, compile, count_flops,
    dense_infer, infer, stage1, stage2,
)
from kernelshare.tensor import ShapeError, conv2d
from netgen import random_network
from oracles import conv_loops, rel_err


def _sparse(rng, shape, density=0.3):
    return rng.standard_normal(shape) * (rng.random(shape) < density)


def test_csr_round_trip_and_layout():
    a = np.zeros((2, 3, 2))
    a[0, 1, 1] = 5.0
    a[1, 0, 0] = -1.0
    a[1, 2, 1] = 2.0
    csr = CsrCoefficients.from_dense(a)
    np.testing.assert_array_equal(csr.indptr, [0, 1, 3])
    np.testing.assert_array_equal(csr.indices, [1 * 2 + 1, 0, 2 * 2 + 1])
    np.testing.assert_array_equal(csr.data, [5.0, -1.0, 2.0])
    assert csr.nnz == 3
    np.testing.assert_array_equal(csr.to_dense(), a)
    b = _sparse(np.random.default_rng(0), (7, 5, 4))
    np.testing.assert_array_equal(CsrCoefficients.from_dense(b).to_dense(), b)


def test_stage1_is_per_channel_convolution_with_each_basis_kernel():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 6, 6))
    basis = rng.standard_normal((4, 9))
    for stride, pad in ((1, 1), (2, 1), (1, 0)):
        planes = stage1(x, basis, stride, pad)
        for j in range(3):
            for m in range(4):
                want = conv_loops(x[:, j:j + 1], basis[m].reshape(1, 1, 3, 3), None, stride, pad)[:, 0]
                assert rel_err(planes[:, j * 4 + m], want) < 1e-12


def test_stage2_matches_dense_contraction():
    rng = np.random.default_rng(2)
    inter = rng.standard_normal((2, 3 * 4, 5, 5))
    a = _sparse(rng, (6, 3, 4))
    bias = rng.standard_normal(6)
    out = stage2(inter, CsrCoefficients.from_dense(a), bias)
    want = np.einsum("ojm,njmhw->nohw", a, inter.reshape(2, 3, 4, 5, 5)) + bias[None, :, None, None]
    assert rel_err(out, want) < 1e-12


def test_empty_row_yields_bias_plane():
    a = np.zeros((2, 1, 3))
    a[0, 0, 0] = 1.0
    out = stage2(np.ones((1, 3, 2, 2)), CsrCoefficients.from_dense(a), np.array([0.0, 4.0]))
    np.testing.assert_array_equal(out[0, 1], 4.0)


def test_stage2_errors():
    csr = CsrCoefficients.from_dense(np.ones((2, 3, 2)))
    with pytest.raises(ShapeError):
        stage2(np.ones((1, 5, 2, 2)), csr)
    broken = CsrCoefficients(csr.indptr, csr.indices + 10, csr.data, csr.dims)
    with pytest.raises(IndexError):
        stage2(np.ones((1, 6, 2, 2)), broken)


@pytest.mark.parametrize("seed", range(10))
def test_two_stage_matches_reconstructed_convolution(seed):
    rng = np.random.default_rng(seed)
    c_in, c_out, d = int(rng.integers(1, 6)), int(rng.integers(1, 6)), int(rng.integers(1, 10))
    basis = rng.standard_normal((d, 9))
    a = _sparse(rng, (c_out, c_in, d), 0.5)
    x = rng.standard_normal((2, c_in, 7, 7))
    stride = int(rng.integers(1, 3))
    got = stage2(stage1(x, basis, stride, 1), CsrCoefficients.from_dense(a))
    theta = np.einsum("ojm,mt->ojt", a, basis).reshape(c_out, c_in, 3, 3)
    assert rel_err(got, conv2d(x, theta, stride=stride, padding=1)) <= 1e-5


def test_compiled_model_matches_graph_forward():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        net = random_network(rng)
        model = compile(net)
        x = rng.standard_normal((3,) + net.input_shape)
        want = forward(net, x)[0]
        assert rel_err(infer(model, x), want) <= 1e-5
        assert rel_err(dense_infer(model, x), want) <= 1e-5


def test_full_basis_two_stage_matches_dense_network():
    net = presets.toy_cnn(seed=5)
    dec = decompose_network(net, default=9)
    x = np.random.default_rng(0).standard_normal((4, 3, 8, 8)).astype(np.float32)
    ref = forward(net, x)[0]
    assert np.max(np.abs(infer(compile(dec), x) - ref)) <= 1e-4 * max(1.0, np.max(np.abs(ref)))


def test_compiled_arrays_are_read_only():
    model = compile(decompose_network(presets.toy_cnn()))
    layer = next(iter(model.layers.values()))
    with pytest.raises(ValueError):
        layer.basis[0, 0] = 1.0


# ---------------------------------------------------------------------------
# operation counts


def test_flops_closed_form_64x64():
    rng = np.random.default_rng(0)
    conv = Conv(np.zeros((64, 64, 3, 3), np.float32), np.zeros(64, np.float32), 1, 1)
    net = Network([conv, ReLU(), GlobalAvgPool(), Linear(np.zeros((10, 64), np.float32), np.zeros(10, np.float32))],
                  (64, 32, 32), 10)
    ledger = count_flops(net)
    assert ledger.layers[0].dense_macs == 37_748_736
    dec = decompose_network(net, default=5)
    a = _sparse(rng, (64, 64, 5), 0.1).astype(np.float32)
    dec.layers[0].coeffs, dec.layers[0].mask = a, a != 0
    row = count_flops(dec).layers[0]
    assert row.stage1_macs == 64 * 5 * 9 * 1024
    assert row.stage2_macs == int(np.count_nonzero(a)) * 1024


def test_flops_random_shapes_against_closed_form():
    rng = np.random.default_rng(1)
    for _ in range(10):
        c_in, c_out = int(rng.integers(1, 20)), int(rng.integers(1, 20))
        k = int(rng.choice([1, 3, 5]))
        h = int(rng.integers(k, 12))
        stride = int(rng.integers(1, 3))
        conv = Conv(np.zeros((c_out, c_in, k, k)), np.zeros(c_out), stride, k // 2)
        net = Network([conv, GlobalAvgPool(), Linear(np.zeros((2, c_out)), np.zeros(2))], (c_in, h, h), 2)
        ho = (h + 2 * (k // 2) - k) // stride + 1
        assert count_flops(net).layers[0].dense_macs == c_out * c_in * k * k * ho * ho


def test_ledger_totals_are_sums_and_params():
    net, _ = prune(decompose_network(presets.resnet56_cifar()), s=1.0)
    ledger = count_flops(net)
    assert ledger.dense_macs == sum(r.dense_macs for r in ledger.layers)
    assert ledger.two_stage_total == ledger.stage1_macs + ledger.stage2_macs
    assert ledger.effective_macs == sum(r.effective_macs for r in ledger.layers)
    bn = sum(2 * l.gamma.size for l in net.layers if isinstance(l, BatchNorm))
    expected = bn
    for _, site in net.sites():
        expected += site.bias.size
        if isinstance(site, DecomposedConv):
            expected += site.basis.size + int(np.count_nonzero(site.coeffs))
        else:
            expected += site.weight.size
    assert ledger.params_total == expected
    doc = json.loads(ledger.to_json())
    assert doc["totals"]["params_total"] == expected


def test_projection_counted_at_its_output_resolution():
    conv = lambda ci, co, s: Conv(np.zeros((co, ci, 3, 3)), np.zeros(co), s, 1)  # noqa: E731
    layers = [conv(2, 4, 1), ReLU(), conv(4, 8, 2), ReLU(), conv(8, 8, 1), ReLU(),
              GlobalAvgPool(), Linear(np.zeros((2, 8)), np.zeros(2))]
    proj = Conv(np.zeros((8, 4, 1, 1)), np.zeros(8), 2, 0)
    net = Network(layers, (2, 8, 8), 2, [SkipEdge(1, 5, proj)])
    row = next(r for r in count_flops(net).layers if r.layer == "S0")
    assert row.dense_macs == 8 * 4 * 16


def test_two_stage_cost_direction():
    # dense coefficients with a full basis cost more than the plain convolution, a small sparse basis costs less
    net = presets.toy_cnn()
    full = count_flops(decompose_network(net, default=9))
    small, _ = prune(decompose_network(net, default=3), s=1.0)
    dense = count_flops(net).dense_macs
    assert full.effective_macs > dense
    assert count_flops(small).effective_macs < dense


# ---------------------------------------------------------------------------
# benchmark harness


def test_median_of_five_is_middle_sample():
    t = VariantTiming("x", 1, [5.0, 1.0, 4.0, 2.0, 3.0], 0.0, 0.0, 0.0)
    assert t.median_ms == 3.0
    result = BenchmarkResult([VariantTiming("dense", 1, [4.0] * 5, 0, 0, 0),
                              VariantTiming("two-stage", 1, [2.0] * 5, 0, 0, 0)], {})
    assert result.speedup == 2.0


def test_benchmark_schema(tmp_path):
    net, _ = prune(decompose_network(presets.toy_cnn()), s=1.0)
    result = benchmark(compile(net), batch_size=2, repetitions=5, warmup=1)
    doc = json.loads(result.to_json())
    assert {v["variant"] for v in doc["variants"]} == {"dense", "two-stage"}
    assert all(len(v["samples_ms"]) == 5 for v in doc["variants"])
    assert {"platform", "cpu_count", "numpy"} <= set(doc["machine"])
    path = tmp_path / "bench.csv"
    result.write_csv(path)
    assert list(csv.DictReader(open(path)).fieldnames) == BENCH_COLUMNS
    with pytest.raises(ValueError):
        benchmark(net, repetitions=4)
