"""Rank-4 float64 tensors in (N, C, H, W) layout.

Tensors are plain contiguous ``numpy.ndarray`` objects; this module only adds
validation and the two gate broadcasts that the attention blocks need.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Shape(NamedTuple):
    n: int
    c: int
    h: int
    w: int

    def __str__(self) -> str:
        return f"{self.n}x{self.c}x{self.h}x{self.w}"


def shape_of(a: np.ndarray) -> Shape:
    if a.ndim != 4:
        raise ShapeError(f"expected a rank-4 tensor, got shape {a.shape}")
    return Shape(*a.shape)


def as_tensor(data, shape: tuple[int, int, int, int] | None = None) -> np.ndarray:
    """Return a contiguous float64 rank-4 array, reshaping flat data if `shape` is given."""
    arr = np.ascontiguousarray(data, dtype=DTYPE)
    if shape is not None:
        if arr.size != int(np.prod(shape)):
            raise ShapeError(f"data of length {arr.size} does not fit shape {tuple(shape)}")
        arr = arr.reshape(shape)
    shape_of(arr)
    return arr


def zeros(n: int, c: int, h: int, w: int) -> np.ndarray:
    return np.zeros((n, c, h, w), dtype=DTYPE)


def ones(n: int, c: int, h: int, w: int) -> np.ndarray:
    return np.ones((n, c, h, w), dtype=DTYPE)


def elementwise_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Multiply `a` by `b`, where `b` is same-shaped, a channel gate or a spatial gate.

    Accepted shapes for `b` against ``a`` of shape N x C x H x W:

    * N x C x H x W (plain elementwise product)
    * N x C x 1 x 1 or 1 x C x 1 x 1 (channel gate)
    * N x 1 x H x W (spatial gate)
    """
    sa, sb = shape_of(a), shape_of(b)
    ok = (
        sa == sb
        or (sb.n in (1, sa.n) and sb.c == sa.c and sb.h == 1 and sb.w == 1)
        or (sb.n == sa.n and sb.c == 1 and sb.h == sa.h and sb.w == sa.w)
    )
    if not ok:
        raise ShapeError(f"cannot multiply {sa} by {sb}")
    return a * b


_AXES = {"hw": (2, 3), "c": (1,)}


def reduce(a: np.ndarray, axes: str, mode: str) -> np.ndarray:
    """Mean or max over the spatial axes (``axes="hw"``) or the channel axis (``axes="c"``).

    Reduced axes are kept with extent 1.
    """
    s = shape_of(a)
    if axes not in _AXES:
        raise ValueError(f"axes must be 'hw' or 'c', got {axes!r}")
    ax = _AXES[axes]
    if any(s[i] == 0 for i in ax):
        raise ShapeError(f"empty reduction domain for shape {s} over {axes}")
    if mode == "mean":
        return a.mean(axis=ax, keepdims=True)
    if mode == "max":
        return a.max(axis=ax, keepdims=True)
    raise ValueError(f"mode must be 'mean' or 'max', got {mode!r}")
