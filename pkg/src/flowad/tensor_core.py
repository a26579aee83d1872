"""Dense 3-way tensor arithmetic and small linear-algebra kernels.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 with ``ndim == 3``.
The linearization used on disk and in the unfoldings is column-major (first
index fastest), following Kolda & Bader: the mode-n unfolding places mode-n
fibers as columns ordered with the lowest remaining mode index varying fastest.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Raised when a factorization breaks down or inputs are not finite."""


def as_tensor3(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 3:
        raise DimensionError(f"expected a 3-way array, got shape {t.shape}")
    return t


def _check_mode(mode: int) -> int:
    if mode not in (1, 2, 3):
        raise ValueError(f"mode must be 1, 2 or 3, got {mode!r}")
    return mode - 1


def unfold(t: np.ndarray, mode: int) -> np.ndarray:
    """Mode-``mode`` unfolding (1-based mode) of a 3-way tensor.

    Returns an array of shape ``(t.shape[mode-1], prod(other dims))``.
    """
    t = as_tensor3(t)
    n = _check_mode(mode)
    return np.reshape(np.moveaxis(t, n, 0), (t.shape[n], -1), order="F")


def refold(m: np.ndarray, mode: int, shape) -> np.ndarray:
    """Inverse of :func:`unfold` for a target tensor ``shape``."""
    n = _check_mode(mode)
    shape = tuple(int(s) for s in shape)
    m = np.asarray(m, dtype=np.float64)
    moved = (shape[n],) + tuple(s for i, s in enumerate(shape) if i != n)
    if m.shape != (moved[0], moved[1] * moved[2]):
        raise DimensionError(f"cannot refold {m.shape} into {shape} along mode {mode}")
    return np.moveaxis(np.reshape(m, moved, order="F"), 0, n)


def khatri_rao(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Column-wise Kronecker product; row index is ``i_a * b.rows + i_b``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"column mismatch: {a.shape[1]} vs {b.shape[1]}")
    return np.einsum("ir,jr->ijr", a, b).reshape(a.shape[0] * b.shape[0], a.shape[1])


def mode_product(t: np.ndarray, m: np.ndarray, mode: int) -> np.ndarray:
    """n-mode product ``t x_n m``; ``m`` has shape ``(new_dim, t.shape[n])``."""
    t = as_tensor3(t)
    n = _check_mode(mode)
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    if m.shape[1] != t.shape[n]:
        raise DimensionError(
            f"matrix has {m.shape[1]} columns but mode {mode} has size {t.shape[n]}"
        )
    return np.moveaxis(np.tensordot(m, t, axes=(1, n)), 0, n)


def cpd_reconstruct(p: np.ndarray, q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Sum of rank-one outer products of the factor columns."""
    p, q1, q2 = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in (p, q1, q2))
    if not p.shape[1] == q1.shape[1] == q2.shape[1]:
        raise DimensionError(
            f"factor rank mismatch: {p.shape[1]}, {q1.shape[1]}, {q2.shape[1]}"
        )
    return np.einsum("ir,jr,kr->ijk", p, q1, q2)


def masked_stats(t: np.ndarray, o: np.ndarray) -> tuple[float, float]:
    """Masked sample mean and variance of ``t`` over the entries where ``o == 1``.

    An empty mask yields ``(0.0, 0.0)`` and a single observation has variance 0.
    """
    t = np.asarray(t, dtype=np.float64)
    o = np.asarray(o, dtype=np.float64)
    if t.shape != o.shape:
        raise DimensionError(f"shape mismatch: {t.shape} vs {o.shape}")
    count = o.sum()
    if count == 0:
        return 0.0, 0.0
    mean = float((o * t).sum() / count)
    if count <= 1:
        return mean, 0.0
    dev = o * t - mean * o
    return mean, float((dev**2).sum() / (count - 1))


def soft_threshold(t: np.ndarray, thresh) -> np.ndarray:
    """Elementwise ``sign(t) * max(|t| - thresh, 0)``."""
    t = np.asarray(t, dtype=np.float64)
    thresh = np.asarray(thresh, dtype=np.float64)
    if np.any(thresh < 0):
        raise ValueError("soft-threshold requires a nonnegative threshold")
    return np.sign(t) * np.maximum(np.abs(t) - thresh, 0.0)


def solve_spd(g: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``g @ x = rhs`` for symmetric positive definite ``g`` via Cholesky."""
    g = np.asarray(g, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(rhs))):
        raise NumericError("non-finite input to solve_spd")
    try:
        factor = scipy.linalg.cho_factor(g, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"Cholesky factorization failed: {exc}") from exc
    return scipy.linalg.cho_solve(factor, rhs, check_finite=False)
