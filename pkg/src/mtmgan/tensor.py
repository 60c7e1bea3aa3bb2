"""Dense-tensor substrate: shape checks and the elementwise/linear primitives.

Tensors are plain float64 numpy arrays in (batch, channel, height, width)
layout; matrices are 2-D float64 arrays. Nothing here broadcasts silently:
shape mismatches raise :class:`ShapeError`. Reductions fix their summation
order (innermost index fastest) so repeated runs are bit-identical.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

LEAKY_SLOPE = 0.2


def as_tensor4(a, name: str = "tensor") -> np.ndarray:
    out = np.asarray(a, dtype=np.float64)
    if out.ndim != 4:
        raise ShapeError(f"{name} must be rank-4 (n,c,h,w), got shape {out.shape}")
    if any(d < 1 for d in out.shape):
        raise ShapeError(f"{name} has a zero dimension: {out.shape}")
    return out


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    out = np.asarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise ShapeError(f"{name} must be rank-2, got shape {out.shape}")
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-by-column product with left-to-right accumulation over the inner dim."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    from . import kernels

    return kernels.matmul(np.ascontiguousarray(a), np.ascontiguousarray(b))


def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0.0, x, slope * x)


def upsample_nearest2x(x: np.ndarray) -> np.ndarray:
    x = as_tensor4(x, "x")
    return x.repeat(2, axis=2).repeat(2, axis=3)


def mean_pool2x(x: np.ndarray) -> np.ndarray:
    x = as_tensor4(x, "x")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"mean_pool2x needs even spatial dims, got {x.shape}")
    r = x.reshape(n, c, h // 2, 2, w // 2, 2)
    # fixed order: right neighbor first, then the row below
    return 0.25 * (((r[:, :, :, 0, :, 0] + r[:, :, :, 0, :, 1])
                    + r[:, :, :, 1, :, 0]) + r[:, :, :, 1, :, 1])


def check_finite(a: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.isfinite(a).all():
        from .errors import NumericError

        raise NumericError(f"{what} contains non-finite values")
    return a
