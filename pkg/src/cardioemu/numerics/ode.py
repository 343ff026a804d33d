"""Fixed-step classical Runge-Kutta integration.

Fixed steps keep runs bit-reproducible; the final partial step is
shortened so the trajectory lands exactly on the requested end time.
"""

from __future__ import annotations

import numpy as np

from cardioemu.errors import ConfigurationError, SimulationDivergedError


def rk4_step(deriv, t, y, dt):
    """One classical RK4 step from (t, y)."""
    k1 = deriv(t, y)
    k2 = deriv(t + 0.5 * dt, y + (0.5 * dt) * k1)
    k3 = deriv(t + 0.5 * dt, y + (0.5 * dt) * k2)
    k4 = deriv(t + dt, y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_integrate(deriv, state0, t0, t1, dt):
    """Integrate dy/dt = deriv(t, y) from t0 to t1 with fixed step dt.

    Returns (times, states) with states[k] the state at times[k]; both
    endpoints are included. Raises SimulationDivergedError (carrying the
    time stamp) as soon as any state component goes non-finite.
    """
    if dt <= 0.0:
        raise ConfigurationError("dt must be positive")
    if t1 <= t0:
        raise ConfigurationError("t1 must exceed t0")
    y = np.asarray(state0, dtype=np.float64).copy()
    if not np.all(np.isfinite(y)):
        raise SimulationDivergedError(t0)

    span = t1 - t0
    n_full = int(np.floor(span / dt + 1e-9))
    remainder = span - n_full * dt
    has_partial = remainder > 1e-12

    n_points = n_full + 1 + (1 if has_partial else 0)
    times = np.empty(n_points)
    states = np.empty((n_points, y.size))
    times[0] = t0
    states[0] = y

    t = t0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_full):
            y = rk4_step(deriv, t, y, dt)
            t = t0 + (k + 1) * dt
            if not np.all(np.isfinite(y)):
                raise SimulationDivergedError(t)
            times[k + 1] = t
            states[k + 1] = y
        if has_partial:
            y = rk4_step(deriv, t, y, remainder)
            if not np.all(np.isfinite(y)):
                raise SimulationDivergedError(t1)
            times[-1] = t1
            states[-1] = y
    times[-1] = t1
    return times, states
