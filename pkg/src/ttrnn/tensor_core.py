"""Dense tensor primitives.

Dense tensors are plain row-major ``numpy.ndarray`` values (fp64 unless a
caller opts into fp32). The helpers here add the shape validation and the
FLOP instrumentation that the TT code relies on.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


def as_tensor(data, dtype=None, *, allow_fp32: bool = False) -> np.ndarray:
    """Convert ``data`` to a contiguous float array (fp64 by default)."""
    if dtype is None:
        dtype = DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype == np.float32 and not allow_fp32:
        raise TypeError("fp32 tensors require allow_fp32=True")
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise TypeError(f"unsupported dtype {dtype}")
    return np.ascontiguousarray(data, dtype=dtype)


def reshape(t: np.ndarray, new_shape: Sequence[int]) -> np.ndarray:
    new_shape = tuple(int(s) for s in new_shape)
    if any(s < 1 for s in new_shape):
        raise ShapeError(f"axis lengths must be positive, got {new_shape}")
    if math.prod(new_shape) != t.size:
        raise ShapeError(f"cannot reshape {t.shape} (size {t.size}) into {new_shape}")
    return np.reshape(t, new_shape)


# ---------------------------------------------------------------------------
# FLOP instrumentation

_flop_counters: list[list[int]] = []


@contextlib.contextmanager
def count_flops() -> Iterator[list[int]]:
    """Count multiply-adds performed by :func:`contract` inside the block.

    Yields a one-element list whose entry is updated in place.
    """
    counter = [0]
    _flop_counters.append(counter)
    try:
        yield counter
    finally:
        _flop_counters.remove(counter)


def contraction_cost(a_shape, b_shape, axes_a, axes_b) -> int:
    free_a = [s for i, s in enumerate(a_shape) if i not in axes_a]
    free_b = [s for i, s in enumerate(b_shape) if i not in axes_b]
    summed = [a_shape[i] for i in axes_a]
    return math.prod(free_a) * math.prod(free_b) * math.prod(summed)


def _normalize_axes(axes, ndim, name):
    out = []
    for ax in axes:
        ax = int(ax)
        if ax < -ndim or ax >= ndim:
            raise ShapeError(f"{name} axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {name}: {axes}")
    return out


def contract(a: np.ndarray, b: np.ndarray, axes_a: Sequence[int], axes_b: Sequence[int]) -> np.ndarray:
    """Sum over paired axes of ``a`` and ``b``.

    The result carries the free axes of ``a`` followed by the free axes of
    ``b``, each in their original order.
    """
    if len(axes_a) != len(axes_b):
        raise ShapeError("axes_a and axes_b must pair up")
    axes_a = _normalize_axes(axes_a, a.ndim, "axes_a")
    axes_b = _normalize_axes(axes_b, b.ndim, "axes_b")
    for i, j in zip(axes_a, axes_b):
        if a.shape[i] != b.shape[j]:
            raise ShapeError(
                f"axis length mismatch: a.shape[{i}]={a.shape[i]} vs b.shape[{j}]={b.shape[j]}")
    if _flop_counters:
        cost = contraction_cost(a.shape, b.shape, axes_a, axes_b)
        for counter in _flop_counters:
            counter[0] += cost
    return np.tensordot(a, b, axes=(axes_a, axes_b))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_UNARY: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "tanh": np.tanh,
    "sigmoid": sigmoid,
}


def map_elementwise(t: np.ndarray, fn: str, other=None) -> np.ndarray:
    """Apply one of ``tanh``, ``sigmoid``, ``add-const`` or ``hadamard``."""
    if fn in _UNARY:
        return _UNARY[fn](t)
    if fn == "add-const":
        if other is None or np.ndim(other) != 0:
            raise ShapeError("add-const needs a scalar operand")
        return t + other
    if fn == "hadamard":
        other = np.asarray(other)
        if other.shape != t.shape:
            raise ShapeError(f"hadamard shape mismatch {t.shape} vs {other.shape}")
        return t * other
    raise ValueError(f"unknown elementwise function {fn!r}")
