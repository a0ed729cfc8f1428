"""Rank-4 float64 tensors in (batch, channel, height, width) layout.

Tensors are plain C-contiguous ``numpy.ndarray`` objects; the helpers here
only enforce the shape and finiteness contract that every layer relies on.
"""

from __future__ import annotations

import numpy as np

from tiedseg.errors import ShapeError

DTYPE = np.float64


def check_dims(dims) -> tuple[int, int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4:
        raise ShapeError(f"expected 4 dims (n, c, h, w), got {dims}")
    if any(d < 1 for d in dims):
        raise ShapeError(f"all dims must be >= 1, got {dims}")
    return dims


def as_tensor4(a, name: str = "tensor") -> np.ndarray:
    """Validate ``a`` as a finite rank-4 tensor and return it as float64."""
    arr = np.ascontiguousarray(a, dtype=DTYPE)
    if arr.ndim != 4:
        raise ShapeError(f"{name}: expected rank 4, got shape {arr.shape}")
    check_dims(arr.shape)
    check_finite(arr, name)
    return arr


def check_finite(a: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"{name}: non-finite values produced")
    return a


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; its stream is fixed across platforms."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def zeros(dims) -> np.ndarray:
    return np.zeros(check_dims(dims), dtype=DTYPE)


def fill(dims, value: float) -> np.ndarray:
    return np.full(check_dims(dims), float(value), dtype=DTYPE)


def uniform(rng: np.random.Generator, dims, lo: float, hi: float) -> np.ndarray:
    return rng.uniform(lo, hi, size=check_dims(dims)).astype(DTYPE, copy=False)


def _same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"dims mismatch: {a.shape} vs {b.shape}")


def ew_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same(a, b)
    return check_finite(a + b, "ew_add")


def ew_sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same(a, b)
    return check_finite(a - b, "ew_sub")


def ew_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same(a, b)
    return check_finite(a * b, "ew_mul")


def scale(a: np.ndarray, k: float) -> np.ndarray:
    return check_finite(a * float(k), "scale")


def reduce_mean_var_spatial(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-(n, c) mean and biased variance over the spatial plane.

    Both results have shape ``(n, c)``.
    """
    a = np.asarray(a, dtype=DTYPE)
    if a.ndim != 4:
        raise ShapeError(f"expected rank 4, got shape {a.shape}")
    mean = a.mean(axis=(2, 3))
    var = ((a - mean[:, :, None, None]) ** 2).mean(axis=(2, 3))
    return mean, var
