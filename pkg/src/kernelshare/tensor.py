"""
Dense numeric kernels: convolution forward/backward, matrix product and a
symmetric eigensolver.

Tensors are plain ``numpy.ndarray`` objects. Activations are NCHW, conv
weights are (c_out, c_in, k, k). Every routine computes in the dtype of its
inputs, so float32 arrays give the default storage width and float64 arrays
give the verification build.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32
VERIFY_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when array extents do not satisfy an operation's contract."""


class ConvergenceError(RuntimeError):
    pass


def is_finite(x: np.ndarray) -> bool:
    return bool(np.all(np.isfinite(x)))


def output_extent(size: int, k: int, stride: int, padding: int) -> int:
    """Floor-convention output size; trailing rows a strided window cannot reach are dropped."""
    span = size + 2 * padding - k
    if span < 0:
        raise ShapeError(f"kernel {k} larger than padded extent {size + 2 * padding}")
    return span // stride + 1


def _check_conv_args(x, weight, stride, padding):
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and 4-D weight, got {x.shape}, {weight.shape}")
    if weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"square kernels only, got {weight.shape[2:]}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} / padding={padding}")
    k = weight.shape[2]
    return (
        output_extent(x.shape[2], k, stride, padding),
        output_extent(x.shape[3], k, stride, padding),
    )


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Unfold NCHW input into a (N*H'*W', C*k*k) patch matrix.

    Column order is (channel, kh, kw), matching ``weight.reshape(c_out, -1)``.
    """
    n, c, h, w = x.shape
    ho = output_extent(h, k, stride, padding)
    wo = output_extent(w, k, stride, padding)
    win = sliding_window_view(_pad(x, padding), (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)


def col2im(cols: np.ndarray, x_shape, k: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to NCHW."""
    n, c, h, w = x_shape
    ho = output_extent(h, k, stride, padding)
    wo = output_extent(w, k, stride, padding)
    cols = cols.reshape(n, ho, wo, c, k, k)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for kh in range(k):
        for kw in range(k):
            out[:, :, kh:kh + stride * ho:stride, kw:kw + stride * wo:stride] += (
                cols[:, :, :, :, kh, kw].transpose(0, 3, 1, 2)
            )
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(out)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation of NCHW ``x`` with ``weight`` plus per-channel bias.

    Implemented as im2col followed by a single GEMM.
    """
    ho, wo = _check_conv_args(x, weight, stride, padding)
    c_out, _, k, _ = weight.shape
    cols = im2col(x, k, stride, padding)
    y = matmul(cols, weight.reshape(c_out, -1).T)
    if bias is not None:
        y += bias
    return np.ascontiguousarray(y.reshape(x.shape[0], ho, wo, c_out).transpose(0, 3, 1, 2))


def conv2d_shift(x, weight, bias=None, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Second convolution path: accumulate one channel contraction per kernel tap.

    Agrees with :func:`conv2d` to rounding; used to cross-check it.
    """
    ho, wo = _check_conv_args(x, weight, stride, padding)
    n = x.shape[0]
    c_out, _, k, _ = weight.shape
    xp = _pad(x, padding)
    out = np.zeros((n, c_out, ho, wo), dtype=np.result_type(x, weight))
    for kh in range(k):
        for kw in range(k):
            patch = xp[:, :, kh:kh + stride * ho:stride, kw:kw + stride * wo:stride]
            out += np.einsum("nchw,oc->nohw", patch, weight[:, :, kh, kw])
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def conv2d_grads(x, weight, grad_output, stride: int = 1, padding: int = 0):
    """Return ``(grad_input, grad_weight, grad_bias)`` for :func:`conv2d`."""
    ho, wo = _check_conv_args(x, weight, stride, padding)
    c_out, _, k, _ = weight.shape
    n = x.shape[0]
    if grad_output.shape != (n, c_out, ho, wo):
        raise ShapeError(f"grad_output shape {grad_output.shape} != {(n, c_out, ho, wo)}")
    g = grad_output.transpose(0, 2, 3, 1).reshape(-1, c_out)
    cols = im2col(x, k, stride, padding)
    grad_weight = (g.T @ cols).reshape(weight.shape)
    grad_bias = g.sum(axis=0)
    grad_input = col2im(g @ weight.reshape(c_out, -1), x.shape, k, stride, padding)
    return grad_input, grad_weight, grad_bias


@dataclass(frozen=True)
class EigenSystem:
    eigenvalues: np.ndarray   # (m,), non-increasing
    eigenvectors: np.ndarray  # (m, m), column i pairs with eigenvalue i

    @property
    def matrix_dim(self) -> int:
        return self.eigenvalues.shape[0]


def sym_eig(w, tol: float = 1e-10, max_sweeps: int = 100) -> EigenSystem:
    """Eigendecomposition of a small symmetric matrix by cyclic Jacobi rotations.

    Always computed in float64. Sweeps stop once the off-diagonal Frobenius
    norm drops to ``tol * ||W||_F``. Eigenvalues come back sorted descending
    (stable, so ties keep their original column order).
    """
    a = np.array(w, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"square matrix required, got {a.shape}")
    m = a.shape[0]
    if m > 64:
        raise ShapeError(f"matrix dimension {m} exceeds 64")
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-6:
        raise ValueError("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    v = np.eye(m)
    limit = tol * np.linalg.norm(a)

    for sweep in range(max_sweeps + 1):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= limit:
            break
        if sweep == max_sweeps:
            raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps (off={off:.3e})")
        for p in range(m - 1):
            for q in range(p + 1, m):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e100:
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq

    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    return EigenSystem(eigenvalues=vals[order], eigenvectors=v[:, order])
