"""
Kernel-space decomposition of convolution layers.

Every k x k kernel of a layer is flattened into a row of a (c_out*c_in, k*k)
matrix. The top-d eigenvectors of its Gram matrix span the subspace that
minimises the squared projection error of all rows; they become the shared
basis, and each kernel is kept as its d projection coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Optional

import numpy as np

from .graph import Network
from .layers import Conv, DecomposedConv
from .tensor import ShapeError, sym_eig


@dataclass
class KernelMatrix:
    """Flattened kernels: row ``r`` is filter ``r // c_in``, channel ``r % c_in``."""

    rows: np.ndarray
    c_out: int
    c_in: int
    k: int

    @classmethod
    def from_weight(cls, weight: np.ndarray) -> "KernelMatrix":
        c_out, c_in, k, _ = weight.shape
        return cls(weight.reshape(c_out * c_in, k * k), c_out, c_in, k)

    def index(self, r: int):
        return divmod(r, self.c_in)

    def to_weight(self) -> np.ndarray:
        return self.rows.reshape(self.c_out, self.c_in, self.k, self.k)


def decompose_layer(weight: np.ndarray, d: int, center: bool = False):
    """Return ``(basis, coeffs, err2)`` for a conv weight.

    ``basis`` is (d, k*k) with orthonormal rows, ``coeffs`` is (c_out, c_in, d)
    and ``err2`` is the squared Frobenius reconstruction error, equal to the
    sum of the discarded eigenvalues. With ``center`` the row mean is removed
    first and appended as one extra basis row whose coefficients are all 1.
    """
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv weight must be (c_out, c_in, k, k), got {weight.shape}")
    c_out, c_in, k, _ = weight.shape
    if not 1 <= d <= k * k:
        raise ValueError(f"d={d} outside [1, {k * k}]")
    theta = weight.reshape(c_out * c_in, k * k).astype(np.float64)

    if k == 1:
        # a 1x1 kernel is its own coefficient over the unit basis
        basis = np.ones((1, 1))
        coeffs = theta.copy()
        err2 = 0.0
        mean = None
    else:
        mean = theta.mean(axis=0) if center else None
        rows = theta - mean if center else theta
        eig = sym_eig(rows.T @ rows)
        basis = eig.eigenvectors[:, :d].T.copy()
        coeffs = rows @ basis.T
        err2 = float(np.sum((rows - coeffs @ basis) ** 2))
        if center:
            basis = np.vstack([basis, mean[None, :]])
            coeffs = np.hstack([coeffs, np.ones((coeffs.shape[0], 1))])

    dtype = weight.dtype
    return basis.astype(dtype), coeffs.reshape(c_out, c_in, -1).astype(dtype), err2


def reconstruct(basis: np.ndarray, coeffs: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Kernels ``coeffs @ basis`` reshaped to (c_out, c_in, k, k)."""
    if coeffs.ndim != 3 or basis.ndim != 2 or coeffs.shape[2] != basis.shape[0]:
        raise ShapeError(f"coeffs {coeffs.shape} incompatible with basis {basis.shape}")
    k = int(round(np.sqrt(basis.shape[1])))
    if k * k != basis.shape[1]:
        raise ShapeError(f"basis width {basis.shape[1]} is not a square kernel")
    if mask is not None:
        coeffs = np.where(mask, coeffs, 0)
    c_out, c_in, d = coeffs.shape
    return (coeffs.reshape(-1, d) @ basis).reshape(c_out, c_in, k, k)


def decompose_conv(conv: Conv, d: int, center: bool = False) -> DecomposedConv:
    basis, coeffs, _ = decompose_layer(conv.weight, d, center=center)
    return DecomposedConv(
        basis=basis,
        coeffs=coeffs,
        bias=conv.bias.copy(),
        stride=conv.stride,
        padding=conv.padding,
        n_fixed=1 if center and conv.kernel_size > 1 else 0,
    )


def default_d(k: int) -> int:
    return 1 if k == 1 else min(5, k * k)


def decompose_network(
    net: Network,
    d_per_layer: Optional[Mapping] = None,
    default: Optional[int] = None,
    center: bool = False,
    include_projections: bool = True,
) -> Network:
    """Replace conv layers by decomposed equivalents.

    ``d_per_layer`` maps a layer index (or site key like ``"S0"`` for a skip
    projection) to its basis size. When it is omitted every conv layer is
    decomposed, using ``default`` (or 5 for 3x3 kernels, 1 for 1x1 kernels).
    1x1 layers always get d=1 with the unit basis.
    """
    out = net.copy()
    if d_per_layer is None:
        targets: Dict[str, Optional[int]] = {
            key: default for key, site in out.sites() if isinstance(site, Conv)
        }
        if not include_projections:
            targets = {k: v for k, v in targets.items() if k.startswith("L")}
    else:
        targets = {}
        for key, d in d_per_layer.items():
            key = key if isinstance(key, str) else f"L{int(key)}"
            if key.startswith("L"):
                idx = int(key[1:])
                if not 0 <= idx < len(out.layers):
                    raise IndexError(f"layer index {idx} out of range")
            elif not (key.startswith("S") and 0 <= int(key[1:]) < len(out.skips) and out.skips[int(key[1:])].proj is not None):
                raise IndexError(f"no projection at {key}")
            targets[key] = d

    for key, d in targets.items():
        site = out.site(key)
        if not isinstance(site, Conv):
            raise TypeError(f"{key} is {type(site).__name__}, not a Conv layer")
        k = site.kernel_size
        d = 1 if k == 1 else (d if d is not None else default_d(k))
        dec = decompose_conv(site, d, center=center)
        if key.startswith("L"):
            out.layers[int(key[1:])] = dec
        else:
            out.skips[int(key[1:])].proj = dec
    return out
