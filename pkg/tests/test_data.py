import struct

import numpy as np
import pytest

from kernelshare.data import (
    CIFAR10_MEAN, CIFAR10_STD, augment_batch, load_cifar10, load_idx, read_cifar10_binary, read_idx, synthetic,
    write_idx,
)


def _cifar_file(path, labels, rng):
    records = []
    pixels = []
    for y in labels:
        img = rng.integers(0, 256, 3072, dtype=np.uint8)
        pixels.append(img)
        records.append(bytes([y]) + img.tobytes())
    path.write_bytes(b"".join(records))
    return pixels


def test_cifar_record_layout(tmp_path):
    rng = np.random.default_rng(0)
    pixels = _cifar_file(tmp_path / "b.bin", [7, 2, 9], rng)
    x, y = read_cifar10_binary(tmp_path / "b.bin")
    np.testing.assert_array_equal(y, [7, 2, 9])
    # byte 1 + 1024*c + 32*row + col of the first record
    raw = (tmp_path / "b.bin").read_bytes()
    assert x[0, 1, 3, 5] == raw[1 + 1024 * 1 + 32 * 3 + 5]
    np.testing.assert_array_equal(x[2].ravel(), pixels[2])


def test_cifar_normalisation(tmp_path):
    rng = np.random.default_rng(1)
    _cifar_file(tmp_path / "train.bin", [0, 1], rng)
    _cifar_file(tmp_path / "test.bin", [3], rng)
    data = load_cifar10([tmp_path / "train.bin"], [tmp_path / "test.bin"])
    raw = (tmp_path / "test.bin").read_bytes()
    want = (raw[1 + 2048] / 255.0 - CIFAR10_MEAN[2]) / CIFAR10_STD[2]
    assert data.x_test[0, 2, 0, 0] == pytest.approx(want, rel=1e-6)
    assert data.x_train.dtype == np.float32 and data.num_classes == 10


def test_cifar_bad_size(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"\x00" * 100)
    with pytest.raises(ValueError):
        read_cifar10_binary(tmp_path / "bad.bin")


def test_idx_header_and_round_trip(tmp_path):
    arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    write_idx(tmp_path / "a.idx", arr)
    raw = (tmp_path / "a.idx").read_bytes()
    assert raw[:4] == bytes([0, 0, 0x08, 3])
    assert struct.unpack(">3I", raw[4:16]) == (2, 3, 4)
    np.testing.assert_array_equal(read_idx(tmp_path / "a.idx"), arr)
    f = np.linspace(-1, 1, 6).astype(np.float32)
    write_idx(tmp_path / "f.idx", f)
    np.testing.assert_array_equal(read_idx(tmp_path / "f.idx"), f)


def test_idx_errors(tmp_path):
    (tmp_path / "x").write_bytes(b"\x01\x02\x08\x01")
    with pytest.raises(ValueError):
        read_idx(tmp_path / "x")
    (tmp_path / "y").write_bytes(bytes([0, 0, 0x08, 1]) + struct.pack(">I", 10) + b"\x00" * 3)
    with pytest.raises(ValueError):
        read_idx(tmp_path / "y")


def test_load_idx_dataset(tmp_path):
    rng = np.random.default_rng(2)
    for split, n in (("train", 6), ("test", 4)):
        write_idx(tmp_path / f"{split}-images", rng.integers(0, 256, (n, 5, 5), dtype=np.uint8))
        write_idx(tmp_path / f"{split}-labels", rng.integers(0, 3, n).astype(np.uint8))
    data = load_idx(*(tmp_path / name for name in ("train-images", "train-labels", "test-images", "test-labels")))
    assert data.input_shape == (1, 5, 5)
    assert data.x_train.max() <= 1.0 and len(data.y_test) == 4


def test_synthetic_is_pinned_by_seed():
    a, b = synthetic(seed=3), synthetic(seed=3)
    assert a.x_train.tobytes() == b.x_train.tobytes() and a.y_test.tobytes() == b.y_test.tobytes()
    assert synthetic(seed=4).x_train.tobytes() != a.x_train.tobytes()
    assert a.x_train.shape == (3000, 3, 8, 8) and a.x_test.shape == (600, 3, 8, 8)
    assert set(np.unique(a.y_train)) == {0, 1, 2}


def test_batches_cover_the_split_once():
    data = synthetic(seed=0, n_train=50, n_test=10)
    seen = np.concatenate([y for _, y in data.batches(16, np.random.default_rng(0))])
    assert sorted(seen.tolist()) == sorted(data.y_train.tolist())
    sizes = [len(y) for _, y in data.batches(16)]
    assert sizes == [16, 16, 16, 2]


def test_augment_shapes_and_flip():
    x = np.arange(2 * 1 * 4 * 4, dtype=np.float32).reshape(2, 1, 4, 4)
    out = augment_batch(x, np.random.default_rng(0), pad=0)
    for i in range(2):
        assert np.array_equal(out[i], x[i]) or np.array_equal(out[i], x[i, :, :, ::-1])
