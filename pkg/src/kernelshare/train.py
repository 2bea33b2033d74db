"""
SGD training: dense pretraining, alternating basis/coefficient retraining with
an l1 penalty on coefficients, and masked fine-tuning after pruning.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .data import Dataset
from .graph import Network, backward, forward
from .layers import BatchNorm, Conv, DecomposedConv, Linear

GROUPS = ("basis", "coefficients")
SCHEDULES = ("step-50/75", "cosine")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 1e-4
    base_lr: float = 0.01
    schedule: str = "step-50/75"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 100
    alternation_interval: int = 5
    seed: int = 0
    start_group: str = "basis"

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.alternation_interval < 1:
            raise ValueError("alternation_interval must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.start_group not in GROUPS:
            raise ValueError(f"start_group must be one of {GROUPS}")


@dataclass
class LossBreakdown:
    data_loss: float
    l1_term: float
    total: float = field(init=False)

    def __post_init__(self):
        self.total = self.data_loss + self.l1_term


@dataclass
class EpochLog:
    epoch: int
    active_group: str
    data_loss: float
    l1_term: float
    train_acc: float
    test_acc: float
    coeff_sparsity: float


LOG_COLUMNS = ["epoch", "active_group", "data_loss", "l1_term", "train_acc", "test_acc", "coeff_sparsity"]


def write_epoch_csv(logs: List[EpochLog], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for rec in logs:
            writer.writerow(asdict(rec))


# ---------------------------------------------------------------------------
# losses and gradients


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    n = logits.shape[0]
    loss = -float(log_p[np.arange(n), labels].sum()) / n
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1
    return loss, (grad / n).astype(logits.dtype)


def l1_penalty(net: Network, gamma: float) -> float:
    return gamma * float(sum(np.abs(layer.coeffs).sum(dtype=np.float64) for _, layer in net.decomposed()))


def decomposed_backward(layer: DecomposedConv, grad_theta: np.ndarray, gamma: float, active_group: str):
    """Map the gradient w.r.t. the reconstructed weight onto basis and coefficients.

    Returns ``(grad_basis, grad_coeffs)``. The coefficient gradient includes
    the l1 subgradient ``gamma * sign(A)``. The frozen group's gradient comes
    back as zeros, as do masked and fixed coefficient positions.
    """
    c_out, c_in, d = layer.coeffs.shape
    if grad_theta.shape != (c_out, c_in) + (layer.kernel_size,) * 2:
        raise ValueError(f"grad_theta shape {grad_theta.shape} does not match layer weight")
    g = grad_theta.reshape(c_out * c_in, -1)
    a = layer.coeffs.reshape(c_out * c_in, d)
    grad_b = np.zeros_like(layer.basis)
    grad_a = np.zeros_like(layer.coeffs)
    if active_group in ("basis", "all"):
        grad_b = (a.T @ g).astype(layer.basis.dtype)
    if active_group in ("coefficients", "all"):
        grad_a = (g @ layer.basis.T).reshape(layer.coeffs.shape) + gamma * np.sign(layer.coeffs)
        grad_a = np.where(layer.mask, grad_a, 0).astype(layer.coeffs.dtype)
        if layer.n_fixed:
            grad_a[:, :, d - layer.n_fixed:] = 0
    return grad_b, grad_a


@dataclass
class Slot:
    key: str
    owner: object
    attr: str
    group: str   # "basis", "coefficients" or "shared"
    decay: bool


def param_slots(net: Network) -> List[Slot]:
    slots = []
    for key, site in net.sites():
        if isinstance(site, DecomposedConv):
            slots += [
                Slot(f"{key}.basis", site, "basis", "basis", True),
                Slot(f"{key}.coeffs", site, "coeffs", "coefficients", False),
            ]
        else:
            slots.append(Slot(f"{key}.weight", site, "weight", "shared", True))
        slots.append(Slot(f"{key}.bias", site, "bias", "shared", True))
    for k, layer in enumerate(net.layers):
        if isinstance(layer, BatchNorm):
            slots += [
                Slot(f"L{k}.gamma", layer, "gamma", "shared", True),
                Slot(f"L{k}.beta", layer, "beta", "shared", False),
            ]
    return slots


def parameter_grads(net: Network, raw: Dict[str, dict], gamma: float, active_group: str) -> Dict[str, np.ndarray]:
    """Flatten per-site gradients to slot keys, expanding decomposed sites."""
    out = {}
    for key, site in net.sites():
        g = raw.get(key)
        if g is None:
            continue
        if isinstance(site, DecomposedConv):
            gb, ga = decomposed_backward(site, g["theta"], gamma, active_group)
            out[f"{key}.basis"], out[f"{key}.coeffs"] = gb, ga
        else:
            out[f"{key}.weight"] = g["weight"]
        out[f"{key}.bias"] = g["bias"]
    for k, layer in enumerate(net.layers):
        if isinstance(layer, BatchNorm) and f"L{k}" in raw:
            out[f"L{k}.gamma"] = raw[f"L{k}"]["gamma"]
            out[f"L{k}.beta"] = raw[f"L{k}"]["beta"]
    return out


class SGD:
    """SGD with heavy-ball momentum; buffers persist across group switches."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: Dict[str, np.ndarray] = {}

    def step(self, net: Network, grads: Dict[str, np.ndarray], lr: float, active_group: str) -> None:
        for slot in param_slots(net):
            if slot.group != "shared" and active_group != "all" and slot.group != active_group:
                continue
            g = grads.get(slot.key)
            if g is None:
                continue
            p = getattr(slot.owner, slot.attr)
            if slot.decay and self.weight_decay:
                g = g + self.weight_decay * p
            buf = self.buffers.get(slot.key)
            if buf is None or buf.shape != p.shape or self.momentum == 0:
                buf = g.astype(p.dtype, copy=True)
            else:
                buf = self.momentum * buf + g
            if slot.group == "coefficients":
                buf = np.where(slot.owner.mask, buf, 0).astype(p.dtype)
            self.buffers[slot.key] = buf
            p = (p - lr * buf).astype(p.dtype)
            if slot.group == "coefficients":
                p[~slot.owner.mask] = 0
            setattr(slot.owner, slot.attr, p)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.schedule == "cosine":
        return cfg.base_lr * 0.5 * (1 + math.cos(math.pi * epoch / max(cfg.epochs, 1)))
    factor = 1.0
    for milestone in (int(0.5 * cfg.epochs), int(0.75 * cfg.epochs)):
        if epoch >= milestone:
            factor *= 0.1
    return cfg.base_lr * factor


def group_schedule(epochs: int, interval: int, start: str = "basis") -> List[str]:
    other = GROUPS[1] if start == GROUPS[0] else GROUPS[0]
    return [start if (e // interval) % 2 == 0 else other for e in range(epochs)]


def coefficient_sparsity(net: Network, tol: float = 1e-3) -> float:
    """Fraction of coefficient entries with magnitude below ``tol`` (0 if none)."""
    total = small = 0
    for _, layer in net.decomposed():
        total += layer.coeffs.size
        small += int(np.count_nonzero(np.abs(layer.coeffs) < tol))
    return small / total if total else 0.0


def evaluate(net: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    correct = 0
    for start in range(0, len(x), batch_size):
        logits, _ = forward(net, x[start:start + batch_size])
        correct += int(np.count_nonzero(logits.argmax(axis=1) == y[start:start + batch_size]))
    return correct / max(len(x), 1)


def train_epoch(net: Network, data: Dataset, cfg: TrainConfig, active_group: str,
                optimizer: Optional[SGD] = None, epoch: int = 0, lr: Optional[float] = None):
    """One pass over the training set; returns ``(net', LossBreakdown, train_accuracy)``.

    ``active_group`` is ``"basis"``, ``"coefficients"`` or ``"all"``. BN
    parameters, biases and non-decomposed layers train in every phase.
    """
    net = net.copy()
    optimizer = optimizer or SGD(cfg.momentum, cfg.weight_decay)
    lr = lr_at(cfg, epoch) if lr is None else lr
    rng = np.random.default_rng([cfg.seed, epoch])
    dtype = net.dtype
    seen = correct = 0
    data_sum = l1_sum = 0.0
    n_batches = 0
    for xb, yb in data.batches(cfg.batch_size, rng):
        logits, trace = forward(net, xb.astype(dtype, copy=False), training=True)
        loss, dlogits = cross_entropy(logits, yb)
        l1 = l1_penalty(net, cfg.gamma)
        if not (math.isfinite(loss) and math.isfinite(l1)):
            raise TrainingError(f"non-finite loss at epoch {epoch}, batch {n_batches}: data={loss}, l1={l1}")
        raw = backward(net, trace, dlogits)
        optimizer.step(net, parameter_grads(net, raw, cfg.gamma, active_group), lr, active_group)
        n = len(yb)
        seen += n
        correct += int(np.count_nonzero(logits.argmax(axis=1) == yb))
        data_sum += loss * n
        l1_sum += l1
        n_batches += 1
    breakdown = LossBreakdown(data_sum / max(seen, 1), l1_sum / max(n_batches, 1))
    return net, breakdown, correct / max(seen, 1)


def _run(net, data, cfg, groups, gamma_override=None):
    if gamma_override is not None:
        cfg = TrainConfig(**{**asdict(cfg), "gamma": gamma_override})
    optimizer = SGD(cfg.momentum, cfg.weight_decay)
    logs = []
    for epoch, group in enumerate(groups):
        net, loss, acc = train_epoch(net, data, cfg, group, optimizer, epoch)
        logs.append(EpochLog(
            epoch=epoch, active_group=group, data_loss=loss.data_loss, l1_term=loss.l1_term,
            train_acc=acc, test_acc=evaluate(net, data.x_test.astype(net.dtype, copy=False), data.y_test),
            coeff_sparsity=coefficient_sparsity(net),
        ))
    return net, logs


def pretrain(net: Network, data: Dataset, cfg: TrainConfig):
    """Plain SGD on every parameter; returns ``(net', epoch_logs)``."""
    return _run(net, data, cfg, ["all"] * cfg.epochs)


def retrain(net: Network, data: Dataset, cfg: TrainConfig):
    """Alternate basis-only and coefficient-only phases of ``alternation_interval`` epochs."""
    if not net.decomposed():
        raise ValueError("retrain needs at least one decomposed layer")
    groups = group_schedule(cfg.epochs, cfg.alternation_interval, cfg.start_group)
    return _run(net, data, cfg, groups)


def finetune_masked(net: Network, data: Dataset, cfg: TrainConfig):
    """Joint training of all groups with no l1 term; pruned coefficients stay at zero."""
    return _run(net, data, cfg, ["all"] * cfg.epochs, gamma_override=0.0)
