"""Dense float64 tensors.

The engine uses plain :class:`numpy.ndarray` objects (float64, C order,
NCHW for images) as its tensor type.  The helpers here add the shape
discipline the rest of the package relies on: no implicit broadcasting,
descriptive shape errors and loud failures on non-finite values.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class NonFiniteError(FloatingPointError):
    """Raised when an engine result contains NaN or Inf."""


def _shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ShapeError(f"shape dimensions must be positive, got {shape}")
    return shape


def as_tensor(data) -> np.ndarray:
    return np.ascontiguousarray(data, dtype=DTYPE)


def zeros(shape: Sequence[int]) -> np.ndarray:
    return np.zeros(_shape(shape), dtype=DTYPE)


def fill(shape: Sequence[int], value: float) -> np.ndarray:
    return np.full(_shape(shape), float(value), dtype=DTYPE)


def reshape(t: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    shape = _shape(shape)
    if int(np.prod(shape)) != t.size:
        raise ShapeError(f"cannot reshape tensor of shape {t.shape} into {shape}")
    return np.ascontiguousarray(t).reshape(shape)


def _same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "add")
    return a + b


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "sub")
    return a - b


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "mul")
    return a * b


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return a @ b


def mean_over_axes(t: np.ndarray, axes: Sequence[int]) -> np.ndarray:
    """Mean over ``axes``; the reduced axes are dropped."""
    axes = tuple(sorted({ax % t.ndim for ax in axes}))
    return t.mean(axis=axes)


def check_finite(t: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(t)):
        bad = int(np.count_nonzero(~np.isfinite(t)))
        raise NonFiniteError(f"{what} of shape {t.shape} has {bad} non-finite values")
    return t
