"""Dense matrix kernels and activations.

A "matrix" here is a 2-D, C-contiguous ``float64`` numpy array. Every public
function checks shapes explicitly and never broadcasts.
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, UsageError

Matrix = np.ndarray


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> Matrix:
    """Coerce ``data`` to a 2-D float64 matrix.

    1-D input becomes a column vector. Explicit ``rows``/``cols`` reshape a flat
    row-major buffer.
    """
    a = np.asarray(data, dtype=np.float64)
    if rows is not None or cols is not None:
        if rows is None or cols is None:
            raise UsageError("rows and cols must be given together")
        if a.size != rows * cols:
            raise DimensionError(f"buffer of length {a.size} cannot fill a {rows}x{cols} matrix")
        a = a.reshape(rows, cols)
    elif a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(-1, 1)
    elif a.ndim != 2:
        raise DimensionError(f"expected at most 2 dimensions, got shape {a.shape}")
    return np.ascontiguousarray(a)


def _check_finite(out: Matrix, op: str) -> Matrix:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op} produced non-finite entries")
    return out


def matmul(a: Matrix, b: Matrix) -> Matrix:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _check_finite(a @ b, "matmul")


def hadamard(a: Matrix, b: Matrix) -> Matrix:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape != b.shape:
        raise DimensionError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    return _check_finite(a * b, "hadamard")


def concat_rows(top: Matrix, bottom: Matrix) -> Matrix:
    top, bottom = np.asarray(top, dtype=np.float64), np.asarray(bottom, dtype=np.float64)
    if top.ndim != 2 or bottom.ndim != 2:
        raise DimensionError(f"concat_rows needs 2-D operands, got {top.shape} and {bottom.shape}")
    if top.shape[1] != bottom.shape[1]:
        raise DimensionError(f"concat_rows column mismatch: {top.shape} vs {bottom.shape}")
    return np.ascontiguousarray(np.vstack([top, bottom]))


def sigmoid(x: Matrix) -> Matrix:
    x = np.asarray(x, dtype=np.float64)
    # exp(-|x|) never overflows; pick the branch that keeps the ratio bounded
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def tanh(x: Matrix) -> Matrix:
    return np.tanh(np.asarray(x, dtype=np.float64))


def sigmoid_prime(x: Matrix) -> Matrix:
    s = sigmoid(x)
    return s * (1.0 - s)


def tanh_prime(x: Matrix) -> Matrix:
    t = tanh(x)
    return 1.0 - t * t


def relu(x: Matrix) -> Matrix:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def l2_norm(gs: Sequence[Matrix] | Iterable[Matrix]) -> float:
    """Global Euclidean norm over every entry of every matrix in ``gs``."""
    gs = list(gs)
    if not gs:
        raise UsageError("l2_norm needs at least one matrix")
    total = 0.0
    for g in gs:
        g = np.asarray(g, dtype=np.float64)
        total += float(np.dot(g.ravel(), g.ravel()))
    return float(np.sqrt(total))
