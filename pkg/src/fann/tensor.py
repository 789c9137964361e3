"""Dense float64 arrays plus the small shape algebra everything else uses.

Tensors are numpy float64 arrays in C (row-major) order. Feature maps are
channels-first ``(C, H, W)``; matrices are ``(rows, cols)``. Every array
returned by a public operation here is marked read-only: treat it as
immutable and build new tensors instead of mutating.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "tensor",
    "zeros",
    "elementwise",
    "add",
    "sub",
    "mul",
    "scale",
    "max_with_zero",
    "reduce_value",
    "total",
    "sum_of_squares",
    "max_value",
    "slice_height",
    "concat_height",
]


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def tensor(data) -> np.ndarray:
    """Copy ``data`` into a validated, contiguous, read-only float64 array."""
    arr = np.array(data, dtype=np.float64, order="C")
    if arr.ndim == 0:
        raise ValueError("tensors need at least one dimension")
    if any(d < 1 for d in arr.shape):
        raise ValueError(f"all extents must be >= 1, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("tensor contains non-finite values")
    return _frozen(arr)


def zeros(shape) -> np.ndarray:
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0 or any(d < 1 for d in shape):
        raise ValueError(f"all extents must be >= 1, got shape {shape}")
    return _frozen(np.zeros(shape, dtype=np.float64))


def _require_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _result(arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise ValueError("operation produced non-finite values")
    return _frozen(np.ascontiguousarray(arr, dtype=np.float64))


def add(a, b):
    _require_same_shape(a, b)
    return _result(a + b)


def sub(a, b):
    _require_same_shape(a, b)
    return _result(a - b)


def mul(a, b):
    _require_same_shape(a, b)
    return _result(a * b)


def scale(a, factor: float):
    return _result(a * float(factor))


def max_with_zero(a):
    return _result(np.maximum(a, 0.0))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "max_with_zero": lambda a, b=None: max_with_zero(a),
}


def elementwise(op: str, a, b=None):
    """Dispatch by name; binary ops require identical shapes."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op in ("add", "sub", "mul", "scale"):
        return fn(a, b)
    return fn(a)


def total(t) -> float:
    return float(np.sum(t))


def sum_of_squares(t) -> float:
    return float(np.sum(np.asarray(t) ** 2))


def max_value(t) -> float:
    return float(np.max(t))


_REDUCE = {"sum": total, "sum_of_squares": sum_of_squares, "max": max_value}


def reduce_value(op: str, t) -> float:
    try:
        fn = _REDUCE[op]
    except KeyError:
        raise ValueError(f"unknown reduce op {op!r}") from None
    if np.asarray(t).size == 0:
        raise ValueError("cannot reduce an empty tensor")
    return fn(t)


def slice_height(t: np.ndarray, parts: int) -> list[np.ndarray]:
    """Split a (C, H, W) tensor into ``parts`` bands along the height axis.

    Heights differ by at most one; when H is not divisible the earlier
    slices take the extra row, so concatenating the result reproduces
    the input exactly.
    """
    if t.ndim != 3:
        raise ValueError(f"expected a (C, H, W) tensor, got shape {t.shape}")
    if parts < 1:
        raise ValueError("parts must be >= 1")
    height = t.shape[1]
    if parts > height:
        raise ValueError(f"cannot slice height {height} into {parts} parts")
    base, extra = divmod(height, parts)
    out = []
    row = 0
    for i in range(parts):
        h = base + (1 if i < extra else 0)
        view = t[:, row : row + h, :]
        view.flags.writeable = False
        out.append(view)
        row += h
    return out


def concat_height(slices) -> np.ndarray:
    if not slices:
        raise ValueError("nothing to concatenate")
    channels = slices[0].shape[0]
    width = slices[0].shape[2]
    for s in slices:
        if s.ndim != 3 or s.shape[0] != channels or s.shape[2] != width:
            raise ValueError(
                f"shape mismatch: {slices[0].shape} vs {s.shape}"
            )
    return _frozen(np.concatenate(slices, axis=1))
