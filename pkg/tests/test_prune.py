import numpy as np
import pytest

from kernelshare import presets
from kernelshare.decompose import decompose_conv, decompose_network
from kernelshare.graph import Network
from kernelshare.layers import Conv, DecomposedConv, GlobalAvgPool, Linear, ReLU
from kernelshare.prune import compute_threshold, prune, sparsity_report


def _net(coeffs, basis=None, n_fixed=0):
    c_out, c_in, d = coeffs.shape
    basis = np.eye(9)[:d] if basis is None else basis
    layer = DecomposedConv(basis, np.asarray(coeffs, float), np.zeros(c_out), 1, 1, n_fixed=n_fixed)
    return Network([layer, ReLU(), GlobalAvgPool(), Linear(np.eye(c_out), np.zeros(c_out))], (c_in, 4, 4), c_out)


def test_hand_worked_threshold():
    net = _net(np.array([1.0, -1.0, 0.0, 0.0]).reshape(1, 1, 4))
    out, report = prune(net, s=1.0)
    assert report.thresholds["L0"] == pytest.approx(np.sqrt(0.5), abs=1e-12)
    assert report.nnz == 2
    np.testing.assert_array_equal(out.layers[0].mask.ravel(), [True, True, False, False])


def test_population_std_oracle():
    a = np.random.default_rng(0).standard_normal((4, 3, 5))
    mean = a.sum() / a.size
    std = np.sqrt(((a - mean) ** 2).sum() / a.size)
    assert compute_threshold(a, 2.0) == pytest.approx(2.0 * std, rel=1e-12)
    nz = np.array([0.0, 0.0, 3.0, -3.0])
    assert compute_threshold(nz, 1.0, nonzero_only=True) == pytest.approx(3.0)


def test_zero_sensitivity_keeps_nonzero_entries():
    a = np.random.default_rng(1).standard_normal((3, 2, 5))
    out, report = prune(_net(a), s=0.0)
    np.testing.assert_array_equal(out.layers[0].coeffs, a)
    assert report.nnz == a.size


def test_entry_equal_to_threshold_survives():
    a = np.array([1.0, -1.0, 0.5, 0.25]).reshape(1, 1, 4)
    out, _ = prune(_net(a), thresholds={"L0": 0.5})
    np.testing.assert_array_equal(out.layers[0].mask.ravel(), [True, True, True, False])


def test_idempotent_under_same_thresholds():
    net = decompose_network(presets.toy_cnn(seed=2))
    once, report = prune(net, s=0.8)
    twice, report2 = prune(once, thresholds=report.thresholds)
    for (_, a), (_, b) in zip(once.decomposed(), twice.decomposed()):
        assert a.coeffs.tobytes() == b.coeffs.tobytes()
        np.testing.assert_array_equal(a.mask, b.mask)
    assert report.nnz == report2.nnz


def test_monotone_in_sensitivity():
    net = decompose_network(presets.toy_cnn(seed=3))
    nnz = [prune(net, s=s)[1].nnz for s in (0.0, 0.25, 0.5, 1.0, 1.5, 3.0)]
    assert all(a >= b for a, b in zip(nnz, nnz[1:]))


def test_pruned_entries_are_positive_zero():
    net = decompose_network(presets.toy_cnn(seed=4))
    out, _ = prune(net, s=1.0)
    for _, layer in out.decomposed():
        dead = layer.coeffs[~layer.mask]
        assert not dead.any() and not np.signbit(dead).any()
        assert not np.signbit(layer.coeffs[~layer.mask]).any()


def test_fixed_slice_excluded_from_statistic_and_pruning():
    rng = np.random.default_rng(5)
    conv = Conv(rng.standard_normal((4, 3, 3, 3)) + 5.0, np.zeros(4), 1, 1)
    layer = decompose_conv(conv, 4, center=True)
    net = Network([layer, ReLU(), GlobalAvgPool(), Linear(np.eye(4), np.zeros(4))], (3, 4, 4), 4)
    out, report = prune(net, s=100.0)
    kept = out.layers[0]
    assert kept.mask[:, :, -1].all()
    np.testing.assert_array_equal(kept.coeffs[:, :, -1], 1.0)
    assert report.thresholds["L0"] == pytest.approx(100.0 * layer.coeffs[:, :, :-1].std())


def test_report_counts_and_json():
    net = decompose_network(presets.toy_cnn(seed=6))
    out, report = prune(net, s=1.0)
    assert report.total == sum(layer.coeffs.size for _, layer in out.decomposed())
    assert report.sparsity == pytest.approx(1 - report.nnz / report.total)
    assert sparsity_report(out).nnz == report.nnz
    import json
    doc = json.loads(report.to_json())
    assert doc["total"]["coefficients"] == f"{report.nnz}/{report.total}"
    assert [row["layer"] for row in doc["layers"]] == [key for key, _ in out.decomposed()]


def test_errors():
    with pytest.raises(ValueError):
        prune(presets.toy_cnn(), s=1.0)
    with pytest.raises(ValueError):
        compute_threshold(np.ones(3), -1.0)
    with pytest.raises(ValueError):
        compute_threshold(np.zeros(3), 1.0, nonzero_only=True)
