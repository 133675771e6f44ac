"""Dense linear algebra, regression and probability primitives.

Every routine here is a pure function of its inputs. Problem sizes are tiny
(a handful of regressors, at most a few hundred thousand rows), so the normal
equations are formed explicitly and solved with a partial-pivot LU
factorisation.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "NumericsError",
    "SingularMatrixError",
    "InsufficientDataError",
    "as_matrix",
    "as_vector",
    "ols_fit",
    "empirical_cdf",
    "empirical_cdf_strict",
    "std_normal_cdf",
    "solve_linear",
    "lu_factor",
]

PIVOT_TOLERANCE = 1e-12


class NumericsError(ValueError):
    """Base class for numerical failures."""


class SingularMatrixError(NumericsError):
    """Raised when a system is singular or too close to singular to solve.

    Parameters
    ----------
    message : str
        Human readable description.
    condition : float
        Rough condition estimate, ratio of the largest to the smallest pivot
        magnitude. ``inf`` when an exact zero pivot was met.
    """

    def __init__(self, message: str, condition: float = math.inf):
        super().__init__(f"{message} (condition estimate {condition:.3g})")
        self.condition = condition


class InsufficientDataError(NumericsError):
    """Raised when there are fewer observations than parameters."""


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Return ``values`` as a finite 2-D float array."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 2:
        raise NumericsError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{name} has non-finite entries")
    return arr


def as_vector(values, name: str = "vector") -> np.ndarray:
    """Return ``values`` as a finite 1-D float array."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1:
        raise NumericsError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{name} has non-finite entries")
    return arr


def lu_factor(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Partial-pivot LU factorisation of a square matrix.

    Parameters
    ----------
    a : ndarray, shape (m, m)

    Returns
    -------
    lu : ndarray, shape (m, m)
        Unit lower factor below the diagonal and upper factor on and above it.
    perm : ndarray of int, shape (m,)
        Row permutation so that ``a[perm] = L @ U``.

    Raises
    ------
    SingularMatrixError
        If a pivot falls below ``1e-12`` times the largest pivot seen so far.
    """
    lu = np.array(a, dtype=float, copy=True)
    m = lu.shape[0]
    perm = np.arange(m)
    scale = np.max(np.abs(lu)) if lu.size else 0.0
    if scale == 0.0:
        raise SingularMatrixError("matrix is identically zero")
    largest = 0.0
    smallest = math.inf
    for k in range(m):
        p = k + int(np.argmax(np.abs(lu[k:, k])))
        pivot = abs(lu[p, k])
        largest = max(largest, pivot)
        if pivot <= PIVOT_TOLERANCE * max(largest, scale):
            cond = math.inf if pivot == 0.0 else largest / pivot
            raise SingularMatrixError(f"zero pivot in column {k}", cond)
        smallest = min(smallest, pivot)
        if p != k:
            lu[[k, p]] = lu[[p, k]]
            perm[[k, p]] = perm[[p, k]]
        lu[k + 1:, k] /= lu[k, k]
        lu[k + 1:, k + 1:] -= np.outer(lu[k + 1:, k], lu[k, k + 1:])
    return lu, perm


def _lu_solve(lu: np.ndarray, perm: np.ndarray, b: np.ndarray) -> np.ndarray:
    m = lu.shape[0]
    y = np.array(b[perm], dtype=float, copy=True)
    for i in range(1, m):
        y[i] -= lu[i, :i] @ y[:i]
    for i in range(m - 1, -1, -1):
        y[i] = (y[i] - lu[i, i + 1:] @ y[i + 1:]) / lu[i, i]
    return y


def solve_linear(a, b) -> np.ndarray:
    """Solve ``A x = b`` for square nonsingular ``A``.

    ``b`` may be a vector or a matrix of right-hand sides.

    Examples
    --------
    >>> solve_linear([[2.0, 0.0], [0.0, 4.0]], [2.0, 8.0])
    array([1., 2.])
    """
    a = as_matrix(a, "A")
    if a.shape[0] != a.shape[1]:
        raise NumericsError(f"A must be square, got shape {a.shape}")
    rhs = np.asarray(b, dtype=float)
    if rhs.shape[0] != a.shape[0] or rhs.ndim > 2:
        raise NumericsError(f"right-hand side shape {rhs.shape} does not match A {a.shape}")
    if not np.all(np.isfinite(rhs)):
        raise NumericsError("right-hand side has non-finite entries")
    lu, perm = lu_factor(a)
    if rhs.ndim == 1:
        return _lu_solve(lu, perm, rhs)
    return np.column_stack([_lu_solve(lu, perm, rhs[:, j]) for j in range(rhs.shape[1])])


def ols_fit(design, targets, with_intercept: bool = False) -> np.ndarray:
    """Least-squares coefficients via the normal equations.

    Parameters
    ----------
    design : array_like, shape (T, p)
    targets : array_like, shape (T, K) or (T,)
    with_intercept : bool
        Append a column of ones to ``design``. The intercept row is the last
        row of the result.

    Returns
    -------
    ndarray, shape (p + with_intercept, K) or (p + with_intercept,)
        ``(X'X)^-1 X'Y`` with ``X`` the (possibly augmented) design.

    Raises
    ------
    InsufficientDataError
        If there are fewer rows than coefficients.
    SingularMatrixError
        If the design is rank deficient.

    Notes
    -----
    Columns are equilibrated to unit norm before forming ``X'X`` and the scale
    is undone afterwards. This keeps raw-unit covariates (hundreds next to
    single digits) from wrecking the pivot threshold.
    """
    x = as_matrix(design, "design")
    y = np.asarray(targets, dtype=float)
    vector_target = y.ndim == 1
    if vector_target:
        y = y[:, None]
    if y.ndim != 2 or y.shape[0] != x.shape[0]:
        raise NumericsError(f"targets shape {np.shape(targets)} does not match design {x.shape}")
    if not np.all(np.isfinite(y)):
        raise NumericsError("targets have non-finite entries")
    if with_intercept:
        x = np.column_stack([x, np.ones(x.shape[0])])
    n_rows, n_cols = x.shape
    if n_rows < n_cols:
        raise InsufficientDataError(f"{n_rows} observations for {n_cols} coefficients")
    norms = np.sqrt(np.sum(x * x, axis=0))
    if np.any(norms == 0.0):
        col = int(np.flatnonzero(norms == 0.0)[0])
        raise SingularMatrixError(f"design column {col} is identically zero")
    xs = x / norms
    coef = solve_linear(xs.T @ xs, xs.T @ y) / norms[:, None]
    return coef[:, 0] if vector_target else coef


def _sorted_sample(sample) -> np.ndarray:
    arr = np.asarray(sample, dtype=float).ravel()
    if arr.size == 0:
        raise NumericsError("empirical CDF of an empty sample")
    return np.sort(arr)


def empirical_cdf(sample, q):
    """Fraction of ``sample`` entries ``<= q``.

    ``q`` may be a scalar or an array; the result has the same shape.

    >>> empirical_cdf([1, 2, 3, 4], 2.5)
    0.5
    """
    s = _sorted_sample(sample)
    out = np.searchsorted(s, q, side="right") / s.size
    return float(out) if np.ndim(out) == 0 else out


def empirical_cdf_strict(sample, q):
    """Fraction of ``sample`` entries strictly below ``q``."""
    s = _sorted_sample(sample)
    out = np.searchsorted(s, q, side="left") / s.size
    return float(out) if np.ndim(out) == 0 else out


def std_normal_cdf(z: float) -> float:
    """Standard normal CDF via the complementary error function.

    Using ``erfc`` on the negated argument keeps full relative accuracy in the
    lower tail, where ``0.5 * (1 + erf(x))`` would cancel.
    """
    z = float(z)
    if math.isnan(z):
        raise NumericsError("std_normal_cdf of NaN")
    return 0.5 * math.erfc(-z / math.sqrt(2.0))
