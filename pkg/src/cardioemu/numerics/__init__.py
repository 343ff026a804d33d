"""Deterministic numerical substrate: tape autodiff, dense linear algebra,
fixed-step ODE integration, and seeded random number generation."""

from cardioemu.numerics.autodiff import Tape, Node, grad
from cardioemu.numerics.linalg import cholesky_factor, cholesky_solve
from cardioemu.numerics.ode import rk4_integrate
from cardioemu.numerics.rng import Rng, gaussian_sample

__all__ = [
    "Tape",
    "Node",
    "grad",
    "cholesky_factor",
    "cholesky_solve",
    "rk4_integrate",
    "Rng",
    "gaussian_sample",
]
