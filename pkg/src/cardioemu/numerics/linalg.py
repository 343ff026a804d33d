"""Dense symmetric-positive-definite helpers built on LAPACK.

Matrices are plain 2-d numpy arrays (row-major). The only extra behavior
over ``numpy.linalg`` is validation: symmetry is checked up to a relative
tolerance and a failed factorization reports which pivot went non-positive
instead of panicking.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from cardioemu.errors import ConfigurationError, NotPositiveDefiniteError

SYMMETRY_RTOL = 1e-10


def _find_failing_pivot(a):
    """Pure-Python Cholesky, run only on the error path to locate the pivot."""
    n = a.shape[0]
    l = np.zeros_like(a)
    for k in range(n):
        d = a[k, k] - np.dot(l[k, :k], l[k, :k])
        if d <= 0.0:
            return k, d
        l[k, k] = np.sqrt(d)
        for i in range(k + 1, n):
            l[i, k] = (a[i, k] - np.dot(l[i, :k], l[k, :k])) / l[k, k]
    return n - 1, a[n - 1, n - 1]


def cholesky_factor(a):
    """Lower-triangular L with L @ L.T == a.

    Raises NotPositiveDefiniteError (with the failing pivot index) when the
    matrix is not positive definite, and ConfigurationError when it is not
    symmetric within 1e-10 relative tolerance.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ConfigurationError(f"cholesky_factor needs a square matrix, got {a.shape}")
    scale = max(np.abs(a).max(), 1.0)
    if np.abs(a - a.T).max() > SYMMETRY_RTOL * scale:
        raise ConfigurationError("matrix is not symmetric within 1e-10 relative tolerance")
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pivot, value = _find_failing_pivot(a)
        raise NotPositiveDefiniteError(pivot, value) from None


def cholesky_solve(l, b):
    """Solve (L L^T) x = b given the lower-triangular factor L."""
    l = np.asarray(l, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != l.shape[0]:
        raise ConfigurationError(
            f"dimension mismatch: factor is {l.shape[0]}x{l.shape[0]}, "
            f"right-hand side has leading dimension {b.shape[0]}"
        )
    y = scipy.linalg.solve_triangular(l, b, lower=True)
    return scipy.linalg.solve_triangular(l, y, lower=True, trans="T")
