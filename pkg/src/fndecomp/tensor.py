"""Dense array helpers and the small amount of exact linear algebra the
factorization loss needs.

Arrays are plain :class:`numpy.ndarray` objects in C order (last axis
fastest). Factorization code works in float64; the model may run in float32.
"""

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are not conformable."""


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when LU elimination meets a zero pivot.

    Attributes
    ----------
    pivot : int
        Column index at which elimination broke down.
    """

    def __init__(self, pivot, message=None):
        self.pivot = int(pivot)
        super().__init__(message or f"matrix is singular at pivot {self.pivot}")


class NonFiniteError(FloatingPointError):
    """Raised when an array contains NaN or Inf."""


def check_finite(a, name="array"):
    """Return ``a`` unchanged, raising :class:`NonFiniteError` if any entry is
    NaN or Inf."""
    a = np.asarray(a)
    if not np.all(np.isfinite(a)):
        bad = int(np.size(a) - np.count_nonzero(np.isfinite(a)))
        raise NonFiniteError(f"{name} contains {bad} non-finite value(s)")
    return a


def matmul(a, b):
    """Matrix product of ``a`` (m x k) and ``b`` (k x n)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    return a @ b


def lu_factor(a):
    """Partial-pivoting LU factorization.

    Returns ``(lu, perm)`` where ``lu`` packs the unit-lower factor below the
    diagonal and the upper factor on and above it, and ``perm`` is the row
    permutation so that ``a[perm] == L @ U``.
    """
    lu = np.array(a, dtype=np.float64, copy=True)
    n = lu.shape[0]
    perm = np.arange(n)
    scale = np.abs(lu).max() if lu.size else 0.0
    tiny = np.finfo(np.float64).eps * max(scale, np.finfo(np.float64).tiny) * n
    for k in range(n):
        p = k + int(np.argmax(np.abs(lu[k:, k])))
        if abs(lu[p, k]) <= tiny:
            raise SingularMatrixError(k)
        if p != k:
            lu[[k, p]] = lu[[p, k]]
            perm[[k, p]] = perm[[p, k]]
        lu[k + 1:, k] /= lu[k, k]
        lu[k + 1:, k + 1:] -= np.outer(lu[k + 1:, k], lu[k, k + 1:])
    return lu, perm


def lu_solve(lu, perm, b):
    """Solve ``a x = b`` given the output of :func:`lu_factor`."""
    n = lu.shape[0]
    x = np.array(b, dtype=np.float64)[perm]
    for i in range(1, n):
        x[i] -= lu[i, :i] @ x[:i]
    for i in range(n - 1, -1, -1):
        x[i] -= lu[i, i + 1:] @ x[i + 1:]
        x[i] /= lu[i, i]
    return x


def ridged(a, ridge):
    """Return ``a + ridge * mean(diag(a)) * I``."""
    a = np.asarray(a, dtype=np.float64)
    if ridge == 0:
        return a
    k = a.shape[0]
    return a + ridge * (np.trace(a) / k) * np.eye(k)


def inverse(a, ridge=0.0):
    """Inverse of ``a + ridge * mean(diag(a)) * I`` by pivoted LU.

    The ridge is scaled by the mean diagonal so it carries no units.

    Raises
    ------
    SingularMatrixError
        If the ridged matrix still has a zero pivot.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"inverse expects a square matrix, got {a.shape}")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    lu, perm = lu_factor(ridged(a, ridge))
    return lu_solve(lu, perm, np.eye(a.shape[0]))


def frobenius_sq(a):
    """Sum of squared entries."""
    a = np.asarray(a)
    return float(np.sum(a * a))


_REDUCERS = {
    "sum": np.sum,
    "mean": np.mean,
    "max": np.max,
    # np.argmax returns the first occurrence, which is the tie rule we want
    "argmax": np.argmax,
}


def reduce(a, axis, kind="sum"):
    """Reduce ``a`` along ``axis`` with one of ``sum``, ``mean``, ``max`` or
    ``argmax`` (ties go to the lowest index)."""
    a = np.asarray(a)
    if kind not in _REDUCERS:
        raise ValueError(f"unknown reduction {kind!r}")
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {a.shape}")
    if a.shape[axis] == 0:
        raise DimensionError("cannot reduce over an empty axis")
    return _REDUCERS[kind](a, axis=axis)
