"""Dataset ingestion: pinned synthetic task, CIFAR-10 binary batches, IDX image files."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass
class Dataset:
    x_train: np.ndarray  # float32 NCHW, normalized
    y_train: np.ndarray  # int64
    x_test: np.ndarray
    y_test: np.ndarray
    augment: bool = False
    num_classes: int = 10

    @property
    def input_shape(self):
        return tuple(self.x_train.shape[1:])

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None, train: bool = True):
        """Yield ``(x, y)`` minibatches; shuffled and augmented when ``rng`` is given."""
        x, y = (self.x_train, self.y_train) if train else (self.x_test, self.y_test)
        order = rng.permutation(len(x)) if rng is not None else np.arange(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            xb = x[idx]
            if train and self.augment and rng is not None:
                xb = augment_batch(xb, rng)
            yield xb, y[idx]


def augment_batch(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random horizontal flip plus a random crop from a zero-padded copy."""
    n, c, h, w = x.shape
    flip = rng.random(n) < 0.5
    x = np.where(flip[:, None, None, None], x[..., ::-1], x)
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    out = np.empty_like(x)
    for i in range(n):
        out[i] = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    return out


def normalize(x: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    mean = np.asarray(mean, np.float32)[None, :, None, None]
    std = np.asarray(std, np.float32)[None, :, None, None]
    return ((x - mean) / std).astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic task


def synthetic(seed: int = 0, n_train: int = 3000, n_test: int = 600, size: int = 8,
              noise: float = 1.0, num_classes: int = 3) -> Dataset:
    """Three-class 8x8x3 task with planted stripe templates.

    Class c is a sinusoidal grating at orientation c (vertical, horizontal,
    diagonal) with random phase and a random per-sample colour mix, buried in
    Gaussian noise. Fully determined by ``seed``.
    """
    rng = np.random.default_rng(seed)
    n = n_train + n_test
    labels = rng.integers(0, num_classes, size=n)
    phase = rng.uniform(0, 2 * np.pi, size=n)
    colour = rng.uniform(0.5, 1.5, size=(n, 3)) * rng.choice([-1.0, 1.0], size=(n, 1))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    direction = np.array([(1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, -1.0)])[:num_classes]
    proj = direction[labels, 0, None, None] * xx + direction[labels, 1, None, None] * yy
    grating = np.sin(2 * np.pi * proj / 4.0 + phase[:, None, None])
    images = colour[:, :, None, None] * grating[:, None, :, :]
    images += noise * rng.normal(size=images.shape)
    images = images.astype(np.float32)
    return Dataset(
        x_train=images[:n_train], y_train=labels[:n_train].astype(np.int64),
        x_test=images[n_train:], y_test=labels[n_train:].astype(np.int64),
        augment=False, num_classes=num_classes,
    )


# ---------------------------------------------------------------------------
# CIFAR-10 binary


def read_cifar10_binary(path) -> Tuple[np.ndarray, np.ndarray]:
    """Read a CIFAR-10 ``*.bin`` batch: 3073-byte records (label, R, G, B planes)."""
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        raise ValueError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    return rec[:, 1:].reshape(-1, 3, 32, 32).copy(), rec[:, 0].astype(np.int64)


def load_cifar10(train_paths, test_paths, mean=CIFAR10_MEAN, std=CIFAR10_STD, augment=True) -> Dataset:
    def load(paths):
        parts = [read_cifar10_binary(p) for p in paths]
        x = np.concatenate([p[0] for p in parts]).astype(np.float32) / 255.0
        return normalize(x, mean, std), np.concatenate([p[1] for p in parts])

    xtr, ytr = load(train_paths)
    xte, yte = load(test_paths)
    return Dataset(xtr, ytr, xte, yte, augment=augment, num_classes=10)


# ---------------------------------------------------------------------------
# IDX

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ValueError(f"{path}: not an IDX file")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_TYPES:
        raise ValueError(f"{path}: unknown IDX type code 0x{code:02x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    data = np.frombuffer(raw, dtype=_IDX_TYPES[code], offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{path}: payload has {data.size} values, header declares {dims}")
    return data.reshape(dims).astype(_IDX_TYPES[code][1:])


def write_idx(path, array: np.ndarray) -> None:
    codes = {v[1:]: k for k, v in _IDX_TYPES.items()}
    kind = array.dtype.str[1:]
    header = bytes([0, 0, codes[kind], array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(_IDX_TYPES[codes[kind]]).tobytes())


def load_idx(train_images, train_labels, test_images, test_labels, mean=None, std=None, augment=False) -> Dataset:
    def images(path):
        x = read_idx(path)
        if x.ndim == 3:
            x = x[:, None]
        x = x.astype(np.float32)
        if x.max() > 1.0:
            x = x / 255.0
        return x

    xtr, xte = images(train_images), images(test_images)
    c = xtr.shape[1]
    mean = mean if mean is not None else [0.0] * c
    std = std if std is not None else [1.0] * c
    ytr = read_idx(train_labels).astype(np.int64)
    yte = read_idx(test_labels).astype(np.int64)
    return Dataset(normalize(xtr, mean, std), ytr, normalize(xte, mean, std), yte,
                   augment=augment, num_classes=int(max(ytr.max(), yte.max())) + 1)
