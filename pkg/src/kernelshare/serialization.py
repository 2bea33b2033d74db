"""
BKNET v1 model files.

Layout::

    b"BKNETv01"                      8-byte magic, last two bytes are the version
    uint32 LE                        header length in bytes
    header                           UTF-8 JSON: layers, shapes, skips, array table
    payload                          arrays back to back in header order
    uint32 LE                        CRC32 of every preceding byte

Float arrays are stored little-endian, 32-bit unless the network itself is
64-bit. Boolean prune masks are bit-packed (``numpy.packbits``, big bit order).
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .graph import Network, SkipEdge, validate
from .layers import LAYER_TYPES, tag

MAGIC_PREFIX = b"BKNETv"
VERSION = b"01"
MAGIC = MAGIC_PREFIX + VERSION


class FormatError(ValueError):
    pass


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass


_DTYPES = {"f4": "<f4", "f8": "<f8", "i8": "<i8"}


class _Writer:
    def __init__(self):
        self.chunks: List[bytes] = []
        self.offset = 0

    def add(self, arr: np.ndarray) -> Dict[str, Any]:
        arr = np.asarray(arr)
        if arr.dtype == bool:
            raw = np.packbits(arr.ravel()).tobytes()
            kind = "bits"
        elif arr.dtype.kind == "f":
            kind = "f8" if arr.dtype.itemsize == 8 else "f4"
            raw = arr.astype(_DTYPES[kind]).tobytes()
        elif arr.dtype.kind in "iu":
            kind = "i8"
            raw = arr.astype(_DTYPES[kind]).tobytes()
        else:
            raise FormatError(f"cannot store array of dtype {arr.dtype}")
        entry = {"offset": self.offset, "nbytes": len(raw), "shape": list(arr.shape), "dtype": kind}
        self.chunks.append(raw)
        self.offset += len(raw)
        return entry


def _describe(layer, writer: _Writer) -> Dict[str, Any]:
    desc: Dict[str, Any] = {"type": tag(layer)}
    arrays = {}
    for name, value in vars(layer).items():
        if isinstance(value, np.ndarray):
            arrays[name] = writer.add(value)
        elif value is not None:
            desc[name] = value
    if arrays:
        desc["arrays"] = arrays
    return desc


def encode(net: Network, metadata: Optional[dict] = None) -> bytes:
    writer = _Writer()
    header = {
        "input_shape": list(net.input_shape),
        "num_classes": net.num_classes,
        "layers": [_describe(layer, writer) for layer in net.layers],
        "skips": [
            {"src": s.src, "dst": s.dst, "proj": _describe(s.proj, writer) if s.proj is not None else None}
            for s in net.skips
        ],
        "metadata": metadata or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<I", len(head)) + head + b"".join(writer.chunks)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_model(net: Network, path, metadata: Optional[dict] = None) -> None:
    Path(path).write_bytes(encode(net, metadata))


def _read_array(payload: memoryview, entry: Dict[str, Any]) -> np.ndarray:
    start, nbytes = entry["offset"], entry["nbytes"]
    if start < 0 or start + nbytes > len(payload):
        raise FormatError("array extends past the payload")
    raw = payload[start:start + nbytes]
    shape = tuple(entry["shape"])
    if entry["dtype"] == "bits":
        count = int(np.prod(shape))
        return np.unpackbits(np.frombuffer(raw, np.uint8), count=count).astype(bool).reshape(shape)
    dt = _DTYPES.get(entry["dtype"])
    if dt is None:
        raise FormatError(f"unknown array dtype {entry['dtype']!r}")
    return np.frombuffer(raw, dt).astype(dt[1:]).reshape(shape)


def _build(desc: Dict[str, Any], payload: memoryview):
    desc = dict(desc)
    kind = desc.pop("type", None)
    cls = LAYER_TYPES.get(kind)
    if cls is None:
        raise FormatError(f"unknown layer type {kind!r}")
    arrays = desc.pop("arrays", {})
    kwargs = {name: _read_array(payload, entry) for name, entry in arrays.items()}
    kwargs.update(desc)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise FormatError(f"bad fields for {kind}: {exc}") from None


def decode(data: bytes) -> Tuple[Network, dict]:
    if len(data) < len(MAGIC) or data[:len(MAGIC_PREFIX)] != MAGIC_PREFIX:
        raise FormatError("not a BKNET file")
    version = data[len(MAGIC_PREFIX):len(MAGIC)]
    if version != VERSION:
        raise VersionError(f"unsupported BKNET version {version!r}")
    if len(data) < len(MAGIC) + 8:
        raise ChecksumError("file truncated")
    body, trailer = data[:-4], data[-4:]
    if zlib.crc32(body) & 0xFFFFFFFF != struct.unpack("<I", trailer)[0]:
        raise ChecksumError("CRC32 mismatch; file is truncated or corrupted")
    (head_len,) = struct.unpack("<I", body[8:12])
    try:
        header = json.loads(body[12:12 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from None
    payload = memoryview(body)[12 + head_len:]
    try:
        layers = [_build(d, payload) for d in header["layers"]]
        skips = [
            SkipEdge(s["src"], s["dst"], _build(s["proj"], payload) if s["proj"] is not None else None)
            for s in header["skips"]
        ]
        net = Network(layers, tuple(header["input_shape"]), header["num_classes"], skips)
    except KeyError as exc:
        raise FormatError(f"header missing field {exc}") from None
    problems = validate(net)
    if problems:
        raise FormatError("stored network is invalid: " + "; ".join(map(str, problems)))
    return net, header.get("metadata", {})


def load_model(path, with_metadata: bool = False):
    net, meta = decode(Path(path).read_bytes())
    return (net, meta) if with_metadata else net
