"""Cholesky factor/solve contracts."""

import numpy as np
import pytest

from cardioemu.errors import ConfigurationError, NotPositiveDefiniteError
from cardioemu.numerics import cholesky_factor, cholesky_solve


def test_identity_factors_to_identity():
    np.testing.assert_array_equal(cholesky_factor(np.eye(3)), np.eye(3))


def test_hand_checkable_2x2():
    l = cholesky_factor(np.array([[4.0, 2.0], [2.0, 3.0]]))
    np.testing.assert_allclose(l, [[2.0, 0.0], [1.0, np.sqrt(2.0)]])


def test_indefinite_matrix_reports_pivot():
    with pytest.raises(NotPositiveDefiniteError) as exc:
        cholesky_factor(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert exc.value.pivot_index == 1


def test_asymmetric_matrix_rejected():
    with pytest.raises(ConfigurationError):
        cholesky_factor(np.array([[1.0, 0.5], [0.2, 1.0]]))


def test_reconstruction_on_random_spd():
    rng = np.random.default_rng(0)
    for n in (2, 5, 17):
        m = rng.normal(size=(n, n))
        a = m.T @ m + n * np.eye(n)
        l = cholesky_factor(a)
        err = np.linalg.norm(l @ l.T - a) / np.linalg.norm(a)
        assert err <= 1e-8
        assert np.allclose(np.triu(l, 1), 0.0)


def test_solve_identity():
    b = np.array([1.0, 2.0])
    np.testing.assert_array_equal(cholesky_solve(np.eye(2), b), b)


def test_solve_matches_2x2_inverse_formula():
    a = np.array([[4.0, 2.0], [2.0, 3.0]])
    b = np.array([2.0, 3.0])
    # independent oracle: closed-form 2x2 inverse
    det = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
    inv = np.array([[a[1, 1], -a[0, 1]], [-a[1, 0], a[0, 0]]]) / det
    x = cholesky_solve(cholesky_factor(a), b)
    np.testing.assert_allclose(x, inv @ b, rtol=1e-12, atol=1e-14)


def test_solve_dimension_mismatch():
    with pytest.raises(ConfigurationError):
        cholesky_solve(np.eye(3), np.array([1.0, 2.0]))


def test_solve_residual_on_random_problems():
    rng = np.random.default_rng(1)
    for n in (3, 8, 20):
        m = rng.normal(size=(n, n))
        a = m.T @ m + n * np.eye(n)
        b = rng.normal(size=n)
        x = cholesky_solve(cholesky_factor(a), b)
        assert np.linalg.norm(a @ x - b) / np.linalg.norm(b) <= 1e-8
