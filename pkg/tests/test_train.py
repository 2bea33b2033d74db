import csv

import numpy as np
import pytest

from kernelshare import presets
from kernelshare.data import Dataset, synthetic
from kernelshare.decompose import decompose_network
from kernelshare.graph import Network, backward, forward
from kernelshare.layers import DecomposedConv, GlobalAvgPool, Linear, ReLU
from kernelshare.train import (
    SGD, TrainConfig, TrainingError, cross_entropy, decomposed_backward, finetune_masked, group_schedule,
    l1_penalty, lr_at, parameter_grads, pretrain, retrain, train_epoch, write_epoch_csv,
)
from oracles import central_diff, rel_err


def _layer(rng, c_out=3, c_in=2, d=4, k=3):
    basis = rng.standard_normal((d, k * k))
    coeffs = rng.standard_normal((c_out, c_in, d))
    return DecomposedConv(basis, coeffs, np.zeros(c_out), 1, k // 2)


def _tiny_data(seed=0, n=64):
    return synthetic(seed=seed, n_train=n, n_test=32, noise=0.5)


# ---------------------------------------------------------------------------
# gradient of the factored layer


@pytest.mark.parametrize("seed", range(20))
def test_factored_gradient_matches_finite_differences(seed):
    # smooth loss of the reconstructed kernel plus the l1 term, probed directly in (B, A)
    rng = np.random.default_rng(seed)
    layer = _layer(rng, int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 10)))
    weights = rng.standard_normal(layer.reconstruct().shape)
    gamma = 0.05

    def loss():
        theta = layer.reconstruct()
        return 0.5 * float(np.sum(weights * theta ** 2)) + gamma * float(np.abs(layer.coeffs).sum())

    gb, ga = decomposed_backward(layer, weights * layer.reconstruct(), gamma, "all")
    assert rel_err(gb, central_diff(loss, layer.basis, 1e-5)) < 1e-6
    assert rel_err(ga, central_diff(loss, layer.coeffs, 1e-5)) < 1e-6


def test_gradient_through_network_matches_finite_differences():
    rng = np.random.default_rng(11)
    layers = [_layer(rng, 4, 2, 5), ReLU(), _layer(rng, 3, 4, 3), ReLU(), GlobalAvgPool(),
              Linear(rng.standard_normal((3, 3)), np.zeros(3))]
    net = Network(layers, (2, 5, 5), 3)
    x = rng.standard_normal((4, 2, 5, 5))
    y = rng.integers(0, 3, 4)
    gamma = 1e-2

    def loss():
        return cross_entropy(forward(net, x)[0], y)[0] + l1_penalty(net, gamma)

    logits, trace = forward(net, x, keep=True)
    grads = parameter_grads(net, backward(net, trace, cross_entropy(logits, y)[1]), gamma, "all")
    for key in ("L0", "L2"):
        site = net.site(key)
        idx_b = [tuple(rng.integers(0, s) for s in site.basis.shape) for _ in range(5)]
        idx_a = [tuple(rng.integers(0, s) for s in site.coeffs.shape) for _ in range(5)]
        fd_b = central_diff(loss, site.basis, 1e-5, idx_b)
        fd_a = central_diff(loss, site.coeffs, 1e-5, idx_a)
        assert rel_err([grads[f"{key}.basis"][i] for i in idx_b], [fd_b[i] for i in idx_b]) < 1e-6
        assert rel_err([grads[f"{key}.coeffs"][i] for i in idx_a], [fd_a[i] for i in idx_a]) < 1e-6


def test_pure_regulariser_gradient_is_gamma_sign():
    layer = _layer(np.random.default_rng(0))
    _, ga = decomposed_backward(layer, np.zeros(layer.reconstruct().shape), 0.3, "coefficients")
    np.testing.assert_array_equal(ga, 0.3 * np.sign(layer.coeffs))


def test_frozen_group_gets_zero_gradient():
    layer = _layer(np.random.default_rng(1))
    g = np.ones(layer.reconstruct().shape)
    gb, ga = decomposed_backward(layer, g, 0.1, "basis")
    assert gb.any() and not ga.any()
    gb, ga = decomposed_backward(layer, g, 0.1, "coefficients")
    assert not gb.any() and ga.any()


def test_masked_and_fixed_positions_get_zero_gradient():
    layer = _layer(np.random.default_rng(2))
    layer.mask = np.random.default_rng(3).random(layer.coeffs.shape) < 0.5
    layer.coeffs = np.where(layer.mask, layer.coeffs, 0)
    layer.n_fixed = 1
    _, ga = decomposed_backward(layer, np.ones(layer.reconstruct().shape), 0.1, "coefficients")
    assert not ga[~layer.mask].any() and not ga[:, :, -1].any()


def test_gradient_shape_check():
    layer = _layer(np.random.default_rng(0))
    with pytest.raises(ValueError):
        decomposed_backward(layer, np.zeros((1, 1, 3, 3)), 0.0, "all")


def test_cross_entropy_gradient_finite_differences():
    rng = np.random.default_rng(4)
    logits = rng.standard_normal((5, 4))
    y = rng.integers(0, 4, 5)
    _, g = cross_entropy(logits, y)
    fd = central_diff(lambda: cross_entropy(logits, y)[0], logits, 1e-6)
    assert rel_err(g, fd) < 1e-6
    assert abs(cross_entropy(np.zeros((2, 4)), np.array([0, 3]))[0] - np.log(4)) < 1e-12


# ---------------------------------------------------------------------------
# optimiser


def _one_layer_net(rng):
    layers = [_layer(rng, 2, 1, 3), ReLU(), GlobalAvgPool(), Linear(rng.standard_normal((2, 2)), np.zeros(2))]
    return Network(layers, (1, 4, 4), 2)


def test_zero_lr_leaves_parameters_unchanged():
    data = _tiny_data()
    net = decompose_network(presets.toy_cnn(input_shape=(3, 8, 8), num_classes=3))
    cfg = TrainConfig(base_lr=0.0, batch_size=32, epochs=1)
    out, _, _ = train_epoch(net, data, cfg, "all")
    for (_, a), (_, b) in zip(net.sites(), out.sites()):
        for name in ("basis", "coeffs", "weight", "bias"):
            if hasattr(a, name):
                assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_single_sgd_step_with_momentum_and_decay():
    rng = np.random.default_rng(5)
    net = _one_layer_net(rng)
    layer = net.layers[0]
    b0, a0 = layer.basis.copy(), layer.coeffs.copy()
    gb, ga = rng.standard_normal(b0.shape), rng.standard_normal(a0.shape)
    opt = SGD(momentum=0.9, weight_decay=0.01)
    opt.step(net, {"L0.basis": gb, "L0.coeffs": ga}, 0.1, "all")
    np.testing.assert_allclose(layer.basis, b0 - 0.1 * (gb + 0.01 * b0), rtol=1e-12)
    np.testing.assert_allclose(layer.coeffs, a0 - 0.1 * ga, rtol=1e-12)  # coefficients are not decayed
    # second step: buffer = 0.9 * previous + new gradient
    b1, a1 = layer.basis.copy(), layer.coeffs.copy()
    opt.step(net, {"L0.basis": gb, "L0.coeffs": ga}, 0.1, "all")
    buf_b = 0.9 * (gb + 0.01 * b0) + gb + 0.01 * b1
    np.testing.assert_allclose(layer.basis, b1 - 0.1 * buf_b, rtol=1e-12)
    np.testing.assert_allclose(layer.coeffs, a1 - 0.1 * 1.9 * ga, rtol=1e-12)


def test_frozen_group_is_not_stepped():
    rng = np.random.default_rng(6)
    net = _one_layer_net(rng)
    b0 = net.layers[0].basis.copy()
    SGD(0.9, 0.01).step(net, {"L0.basis": np.ones_like(b0), "L0.coeffs": np.ones((2, 1, 3))}, 0.1, "coefficients")
    np.testing.assert_array_equal(net.layers[0].basis, b0)


def test_l1_pressure_is_lr_times_gamma():
    # with no data gradient and no momentum, one step moves every live coefficient by lr * gamma toward zero
    rng = np.random.default_rng(7)
    net = _one_layer_net(rng)
    layer = net.layers[0]
    a0 = layer.coeffs.copy()
    _, ga = decomposed_backward(layer, np.zeros(layer.reconstruct().shape), 1e-3, "coefficients")
    SGD(momentum=0.0, weight_decay=0.0).step(net, {"L0.coeffs": ga}, 0.5, "coefficients")
    np.testing.assert_allclose(np.abs(a0) - np.abs(layer.coeffs), 0.5 * 1e-3, rtol=1e-9)


def test_masked_entries_stay_zero_through_finetune():
    data = _tiny_data(1)
    from kernelshare.prune import prune
    net, _ = prune(decompose_network(presets.toy_cnn(input_shape=(3, 8, 8), num_classes=3)), s=1.0)
    out, _ = finetune_masked(net, data, TrainConfig(base_lr=0.05, batch_size=16, epochs=2, schedule="cosine"))
    for (_, a), (_, b) in zip(net.decomposed(), out.decomposed()):
        np.testing.assert_array_equal(a.mask, b.mask)
        assert not b.coeffs[~b.mask].any()


# ---------------------------------------------------------------------------
# schedules


def test_group_schedule_alternates_every_interval():
    assert group_schedule(12, 5) == ["basis"] * 5 + ["coefficients"] * 5 + ["basis"] * 2
    assert group_schedule(4, 2, "coefficients") == ["coefficients"] * 2 + ["basis"] * 2


def test_lr_schedules():
    step = TrainConfig(base_lr=0.1, epochs=100)
    assert lr_at(step, 0) == 0.1 and lr_at(step, 49) == 0.1
    assert abs(lr_at(step, 50) - 0.01) < 1e-15 and abs(lr_at(step, 75) - 0.001) < 1e-15
    cos = TrainConfig(base_lr=0.1, epochs=10, schedule="cosine")
    assert lr_at(cos, 0) == 0.1 and abs(lr_at(cos, 5) - 0.05) < 1e-15


def test_config_validation():
    for bad in ({"gamma": -1}, {"alternation_interval": 0}, {"schedule": "constant"}, {"batch_size": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# ---------------------------------------------------------------------------
# loops


def test_retrain_logs_groups_and_is_deterministic(tmp_path):
    data = _tiny_data(2)
    net = decompose_network(presets.toy_cnn(input_shape=(3, 8, 8), num_classes=3))
    cfg = TrainConfig(base_lr=0.05, batch_size=32, epochs=4, alternation_interval=2, seed=3)
    a, logs = retrain(net, data, cfg)
    b, _ = retrain(net, data, cfg)
    assert [log.active_group for log in logs] == ["basis", "basis", "coefficients", "coefficients"]
    assert all(log.l1_term > 0 for log in logs)
    for (_, x), (_, y) in zip(a.decomposed(), b.decomposed()):
        assert x.coeffs.tobytes() == y.coeffs.tobytes()
    path = tmp_path / "log.csv"
    write_epoch_csv(logs, path)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 4 and rows[0]["active_group"] == "basis"


def test_retrain_needs_decomposed_layers():
    with pytest.raises(ValueError):
        retrain(presets.toy_cnn(), _tiny_data(), TrainConfig(epochs=1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_raises():
    data = _tiny_data(3)
    bad = Dataset(data.x_train * np.float32(np.inf), data.y_train, data.x_test, data.y_test, num_classes=3)
    net = presets.toy_cnn(input_shape=(3, 8, 8), num_classes=3)
    with pytest.raises(TrainingError):
        pretrain(net, bad, TrainConfig(epochs=1, batch_size=32))


def test_pretrain_learns_the_toy_task():
    data = synthetic(seed=0, n_train=600, n_test=300, noise=0.5)
    net = presets.toy_cnn(seed=1, input_shape=(3, 8, 8), num_classes=3)
    out, logs = pretrain(net, data, TrainConfig(base_lr=0.05, batch_size=32, epochs=3, schedule="cosine"))
    assert logs[-1].test_acc > 0.6
