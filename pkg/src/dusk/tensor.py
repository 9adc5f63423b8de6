"""Dense tensors and multilinear primitives.

All tensors are float64 and linearized row-major (last index fastest).
Modes are numbered from 0, like numpy axes.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import Sequence

import numpy as np

from .errors import ArgumentError, NonFiniteError, ShapeError


class DenseTensor:
    """Immutable N-way real array.

    Parameters
    ----------
    data : array_like
        Either an N-dimensional array, or a flat array of values when
        ``shape`` is given.
    shape : sequence of int, optional
        Mode dimensions. ``values`` must then hold ``prod(shape)`` entries in
        row-major order.
    """

    __slots__ = ("_array",)

    def __init__(self, data, shape: Sequence[int] | None = None):
        arr = np.array(data, dtype=np.float64)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if any(s < 1 for s in shape) or len(shape) < 1:
                raise ShapeError(f"invalid shape {shape}")
            if arr.size != int(np.prod(shape)):
                raise ShapeError(
                    f"{arr.size} values do not fill shape {shape} ({int(np.prod(shape))})"
                )
            arr = arr.reshape(shape)
        if arr.ndim < 1 or arr.size == 0:
            raise ShapeError(f"tensor needs order >= 1 and non-empty modes, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor contains NaN or Inf")
        arr.setflags(write=False)
        self._array = arr

    @property
    def array(self) -> np.ndarray:
        return self._array

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def order(self) -> int:
        return self._array.ndim

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the entries."""
        return self._array.reshape(-1)

    def __array__(self, dtype=None, copy=None):
        return self._array if dtype is None else self._array.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, DenseTensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._array, other._array)

    def __hash__(self):
        return hash((self.shape, self._array.tobytes()))

    def __repr__(self):
        return f"DenseTensor(shape={self.shape})"


@dataclass(frozen=True)
class FactorVector:
    """A factor vector attached to one mode of a rank-one term."""

    mode: int
    entries: np.ndarray

    def __post_init__(self):
        e = np.array(self.entries, dtype=np.float64).reshape(-1)
        if e.size == 0:
            raise ArgumentError(f"empty factor vector for mode {self.mode}")
        if not np.all(np.isfinite(e)):
            raise NonFiniteError(f"factor vector for mode {self.mode} is not finite")
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)


def as_array(x) -> np.ndarray:
    if isinstance(x, DenseTensor):
        return x.array
    if isinstance(x, FactorVector):
        return x.entries
    return np.asarray(x, dtype=np.float64)


def inner_product(a, b) -> float:
    """Sum of the products of corresponding entries."""
    a, b = as_array(a), as_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.dot(a.reshape(-1), b.reshape(-1)))


def norm(a) -> float:
    """Frobenius norm."""
    v = as_array(a).reshape(-1)
    # scale first so tiny or huge entries neither underflow nor overflow
    big = float(np.max(np.abs(v))) if v.size else 0.0
    if big == 0.0 or not np.isfinite(big):
        return big
    v = v / big
    return big * float(np.sqrt(np.dot(v, v)))


def tensor_product(vectors: Sequence) -> DenseTensor:
    """Outer product of operands, one per mode, in order.

    Operands may be vectors (the usual case) or tensors of any order; the
    result's modes are the concatenation of the operands' modes.
    """
    if len(vectors) == 0:
        raise ArgumentError("tensor_product needs at least one operand")
    arrays = [as_array(v) for v in vectors]
    for i, v in enumerate(arrays):
        if v.size == 0:
            raise ArgumentError(f"operand {i} is empty")
    out = reduce(np.multiply.outer, arrays)
    return DenseTensor(np.atleast_1d(out))


def rank_one_inner(x: Sequence, y: Sequence) -> float:
    """Inner product of two rank-one tensors from their factors.

    Equals ``inner_product(tensor_product(x), tensor_product(y))`` without
    materializing either tensor.
    """
    if len(x) != len(y):
        raise ShapeError(f"mode count mismatch {len(x)} vs {len(y)}")
    out = 1.0
    for n, (u, v) in enumerate(zip(x, y)):
        u, v = as_array(u).reshape(-1), as_array(v).reshape(-1)
        if u.shape != v.shape:
            raise ShapeError(f"mode {n}: length {u.size} vs {v.size}")
        out *= float(np.dot(u, v))
    return out


def _check_mode(ndim: int, mode: int) -> None:
    if not 0 <= mode < ndim:
        raise ArgumentError(f"mode {mode} out of range for order-{ndim} tensor")


def unfold(a, mode: int) -> np.ndarray:
    """Mode-``mode`` matricization, shape ``(I_mode, prod of other dims)``.

    Columns follow the row-major order of the remaining modes.
    """
    arr = as_array(a)
    _check_mode(arr.ndim, mode)
    return np.moveaxis(arr, mode, 0).reshape(arr.shape[mode], -1)


def refold(mat: np.ndarray, mode: int, shape: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`unfold`."""
    shape = tuple(shape)
    _check_mode(len(shape), mode)
    rest = shape[:mode] + shape[mode + 1:]
    mat = np.asarray(mat)
    if mat.shape != (shape[mode], int(np.prod(rest, dtype=np.int64))):
        raise ShapeError(f"matrix {mat.shape} cannot refold to {shape} along mode {mode}")
    return np.moveaxis(mat.reshape((shape[mode],) + rest), 0, mode)
