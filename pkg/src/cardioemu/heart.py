"""0D cardiovascular forward model.

A single ventricle with time-varying elastance drives a two-element
Windkessel through diode valves. State is (ventricular volume, arterial
pressure); the model maps five mechanistic parameters to a periodic
cardiac trace, its pressure-volume loop, and standard derived
measurements.

Parameter roles: sigma0 scales peak elastance (contractility), r0 sets
the unloaded cavity volume through the ventricle radius, c1 scales the
passive (diastolic) pressure curve, rp is the peripheral resistance, and
tau the arterial time constant, so the Windkessel compliance is tau/rp.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from cardioemu.errors import NotConvergedError, SimulationDivergedError, ValidationError

MITRAL_RESISTANCE = 0.01  # mmHg*s/mL, forward resistance of the filling valve
AORTIC_RESISTANCE = 0.05  # mmHg*s/mL, forward resistance of the ejection valve
VENOUS_PRESSURE = 10.0  # mmHg, constant filling pressure
PASSIVE_EXPONENT = 0.02  # 1/mL in the exponential passive pressure curve
UNLOADED_VOLUME_SCALE = 0.5  # fraction of the spherical cavity volume

# Calibration constants of the elastance waveform. The gain converts the
# contractility parameter into peak active elastance; rise/fall are systole
# fractions of sqrt(cycle length), mimicking how systole shortens with rate.
ELASTANCE_GAIN = 2.8
ELASTANCE_MIN = 0.045  # mmHg/mL baseline elastance
ACTIVATION_RISE = 0.24
ACTIVATION_FALL = 0.13

PERIODICITY_TOL_ML = 0.5
MAX_CYCLES = 30

DEFAULT_HEART_RATE = 70.0
DEFAULT_DT = 1e-3
DEFAULT_CYCLES = 12


@dataclass(frozen=True)
class LumpedParams:
    """The five mechanistic parameters of the forward model."""

    sigma0: float  # fiber contractility, scales peak elastance (mmHg/mL)
    r0: float  # left-ventricle reference radius (cm)
    c1: float  # fiber stiffness, scales the passive pressure curve (mmHg)
    rp: float  # peripheral resistance (mmHg*s/mL)
    tau: float  # arterial (Windkessel) time constant (s)

    def __post_init__(self):
        for name in ("sigma0", "r0", "c1", "rp", "tau"):
            if not getattr(self, name) > 0.0:
                raise ValidationError(f"{name} must be strictly positive")
        compliance = self.tau / self.rp
        if not (0.1 < compliance < 5.0):
            raise ValidationError(
                f"implied arterial compliance tau/rp = {compliance:.3g} mL/mmHg "
                "is outside (0.1, 5)"
            )

    @property
    def compliance(self):
        """Windkessel compliance tau / rp (mL/mmHg)."""
        return self.tau / self.rp

    @property
    def unloaded_volume(self):
        """Unloaded cavity volume from the reference radius (mL)."""
        return UNLOADED_VOLUME_SCALE * (4.0 / 3.0) * math.pi * self.r0**3

    def as_arrays(self):
        return tuple(np.array([v]) for v in (self.sigma0, self.r0, self.c1, self.rp, self.tau))


def default_params():
    """Nominal operating point used for sweeps and calibration checks."""
    return LumpedParams(sigma0=2.0, r0=2.4, c1=1.2, rp=1.1, tau=1.6)


@dataclass
class CardiacTrace:
    """Final simulated cycle: volume and pressures over one period."""

    times: np.ndarray  # seconds from cycle start
    v_lv: np.ndarray  # ventricular volume (mL)
    p_lv: np.ndarray  # ventricular pressure (mmHg)
    p_art: np.ndarray  # arterial pressure (mmHg)
    cycle_length: float  # seconds
    converged: bool
    periodicity_error: float  # |v(start) - v(end)| in mL
    cycles_run: int


@dataclass(frozen=True)
class CardiacMeasurements:
    sv: float  # stroke volume (mL)
    edv: float  # end-diastolic volume (mL)
    esv: float  # end-systolic volume (mL)
    ef: float  # ejection fraction
    sbp: float  # systolic blood pressure (mmHg)
    dbp: float  # diastolic blood pressure (mmHg)
    mbp: float  # mean blood pressure, dbp + (sbp - dbp) / 3 (mmHg)


def activation(t, cycle_length):
    """Normalized activation e(t) in [0, 1]: cosine rise then cosine fall."""
    t_rise = ACTIVATION_RISE * math.sqrt(cycle_length)
    t_fall = ACTIVATION_FALL * math.sqrt(cycle_length)
    t = np.asarray(t, dtype=np.float64)
    tm = np.mod(t, cycle_length)
    rising = 0.5 * (1.0 - np.cos(np.pi * tm / t_rise))
    falling = 0.5 * (1.0 + np.cos(np.pi * (tm - t_rise) / t_fall))
    out = np.where(tm < t_rise, rising, np.where(tm < t_rise + t_fall, falling, 0.0))
    return out if out.ndim else float(out)


def ventricular_pressure(v, t, sigma0, r0, c1, cycle_length):
    """Active elastance plus exponential passive term, vectorized."""
    v0 = UNLOADED_VOLUME_SCALE * (4.0 / 3.0) * np.pi * np.asarray(r0) ** 3
    e = ELASTANCE_GAIN * np.asarray(sigma0) * activation(t, cycle_length) + ELASTANCE_MIN
    dv = np.asarray(v) - v0
    return e * dv + np.asarray(c1) * np.expm1(PASSIVE_EXPONENT * dv)


def _simulate_arrays(sigma0, r0, c1, rp, tau, heart_rate, n_cycles, dt, max_cycles):
    """Vectorized cycle-by-cycle integration for n parameter sets.

    Runs at least ``n_cycles`` cycles, continuing up to ``max_cycles``
    until every (non-failed) subject meets the volume-periodicity
    tolerance. Returns the last simulated cycle for all subjects, plus
    per-subject convergence/failure flags. Diverged subjects are frozen at
    a benign state so they cannot poison the rest of the batch.
    """
    sigma0, r0, c1, rp, tau = (np.asarray(x, dtype=np.float64) for x in (sigma0, r0, c1, rp, tau))
    n = sigma0.size
    cycle_length = 60.0 / heart_rate
    v0 = UNLOADED_VOLUME_SCALE * (4.0 / 3.0) * np.pi * r0**3
    e_peak = ELASTANCE_GAIN * sigma0
    compliance = tau / rp
    inv_c = 1.0 / compliance
    inv_rp_c = 1.0 / (rp * compliance)
    inv_rmit = 1.0 / MITRAL_RESISTANCE
    inv_raor = 1.0 / AORTIC_RESISTANCE

    def rhs(act_value, v, p_art):
        e = e_peak * act_value + ELASTANCE_MIN
        dv = v - v0
        p_lv = e * dv + c1 * np.expm1(PASSIVE_EXPONENT * dv)
        q_in = np.maximum(VENOUS_PRESSURE - p_lv, 0.0) * inv_rmit
        q_out = np.maximum(p_lv - p_art, 0.0) * inv_raor
        return q_in - q_out, q_out * inv_c - p_art * inv_rp_c

    n_steps = int(np.floor(cycle_length / dt + 1e-9))
    remainder = cycle_length - n_steps * dt
    has_partial = remainder > 1e-12
    n_points = n_steps + 1 + (1 if has_partial else 0)

    times = np.empty(n_points)
    times[: n_steps + 1] = np.arange(n_steps + 1) * dt
    times[-1] = cycle_length
    # the activation waveform repeats identically every cycle, so its values
    # at the RK4 stage times are computed once and reused
    act_grid = activation(times, cycle_length)
    act_half = activation(times[: n_steps + 1] + 0.5 * dt, cycle_length)
    act_part_half = activation(n_steps * dt + 0.5 * remainder, cycle_length)

    # start near diastasis: moderately filled ventricle, mid-range pressure
    v = v0 + 60.0
    p = np.full(n, 85.0)
    safe_v, safe_p = v0 + 60.0, 85.0
    traj_v = np.empty((n_points, n))
    traj_p = np.empty((n_points, n))
    failed = np.zeros(n, dtype=bool)
    converged = np.zeros(n, dtype=bool)
    sixth = dt / 6.0
    half = 0.5 * dt

    cycle = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while True:
            cycle += 1
            v_start = v.copy()
            traj_v[0] = v
            traj_p[0] = p
            for k in range(n_steps):
                kv1, kp1 = rhs(act_grid[k], v, p)
                kv2, kp2 = rhs(act_half[k], v + half * kv1, p + half * kp1)
                kv3, kp3 = rhs(act_half[k], v + half * kv2, p + half * kp2)
                kv4, kp4 = rhs(act_grid[k + 1], v + dt * kv3, p + dt * kp3)
                v = v + sixth * (kv1 + 2.0 * (kv2 + kv3) + kv4)
                p = p + sixth * (kp1 + 2.0 * (kp2 + kp3) + kp4)
                traj_v[k + 1] = v
                traj_p[k + 1] = p
            if has_partial:
                kv1, kp1 = rhs(act_grid[n_steps], v, p)
                kv2, kp2 = rhs(act_part_half, v + 0.5 * remainder * kv1, p + 0.5 * remainder * kp1)
                kv3, kp3 = rhs(act_part_half, v + 0.5 * remainder * kv2, p + 0.5 * remainder * kp2)
                kv4, kp4 = rhs(act_grid[-1], v + remainder * kv3, p + remainder * kp3)
                v = v + (remainder / 6.0) * (kv1 + 2.0 * (kv2 + kv3) + kv4)
                p = p + (remainder / 6.0) * (kp1 + 2.0 * (kp2 + kp3) + kp4)
                traj_v[-1] = v
                traj_p[-1] = p
            bad = ~np.isfinite(v) | ~np.isfinite(p)
            if bad.any():
                failed |= bad
                v = np.where(failed, safe_v, v)
                p = np.where(failed, safe_p, p)
            per_err = np.abs(v - v_start)
            per_err[failed] = np.inf
            converged = ~failed & (per_err <= PERIODICITY_TOL_ML)
            if cycle >= n_cycles and (converged | failed).all():
                break
            if cycle >= max_cycles:
                break

    p_lv = ventricular_pressure(traj_v, times[:, None], sigma0, r0, c1, cycle_length)
    return times, traj_v, p_lv, traj_p, converged, failed, per_err, cycle


def simulate(params, heart_rate=DEFAULT_HEART_RATE, n_cycles=DEFAULT_CYCLES, dt=DEFAULT_DT,
             max_cycles=MAX_CYCLES):
    """Run the forward model to a periodic steady state.

    Integrates at least ``n_cycles`` cardiac cycles and continues up to
    ``max_cycles`` until start- and end-of-cycle volumes agree within
    0.5 mL; returns only the final cycle. Raises SimulationDivergedError
    on non-finite states and NotConvergedError when periodicity is never
    reached.
    """
    if not isinstance(params, LumpedParams):
        raise ValidationError("params must be a LumpedParams instance")
    if not (40.0 <= heart_rate <= 120.0):
        raise ValidationError("heart_rate must be within [40, 120] bpm")
    if n_cycles < 3:
        raise ValidationError("n_cycles must be at least 3")
    if dt <= 0:
        raise ValidationError("dt must be positive")

    arrays = params.as_arrays()
    times, v, p_lv, p_art, converged, failed, per_err, cycles = _simulate_arrays(
        *arrays, heart_rate=heart_rate, n_cycles=n_cycles, dt=dt, max_cycles=max_cycles
    )
    if failed[0]:
        raise SimulationDivergedError(cycles * 60.0 / heart_rate)
    if not converged[0]:
        raise NotConvergedError(per_err[0], cycles)
    return CardiacTrace(
        times=times,
        v_lv=v[:, 0],
        p_lv=p_lv[:, 0],
        p_art=p_art[:, 0],
        cycle_length=60.0 / heart_rate,
        converged=True,
        periodicity_error=float(per_err[0]),
        cycles_run=cycles,
    )


def measure(trace):
    """Derived measurements of the final cycle.

    edv/esv are the volume extremes, sbp/dbp the arterial pressure
    extremes; mbp is recomputed from dbp + (sbp - dbp)/3 rather than
    averaging the trace.
    """
    if not trace.converged:
        raise ValidationError("measurements require a converged trace")
    if not (np.all(np.isfinite(trace.v_lv)) and np.all(np.isfinite(trace.p_art))):
        raise ValidationError("trace contains non-finite samples")
    edv = float(trace.v_lv.max())
    esv = float(trace.v_lv.min())
    sv = edv - esv
    if edv <= 0.0 or sv <= 1e-9:
        raise ValidationError("degenerate trace: ejection fraction undefined")
    sbp = float(trace.p_art.max())
    dbp = float(trace.p_art.min())
    if sbp - dbp <= 1e-9:
        raise ValidationError("degenerate trace: flat arterial pressure")
    return CardiacMeasurements(
        sv=sv,
        edv=edv,
        esv=esv,
        ef=sv / edv,
        sbp=sbp,
        dbp=dbp,
        mbp=dbp + (sbp - dbp) / 3.0,
    )


def pv_loop(trace):
    """Closed (volume, pressure) polygon of the final cycle, time-ordered."""
    if not trace.converged:
        raise ValidationError("pv_loop requires a converged trace")
    pairs = [(float(v), float(p)) for v, p in zip(trace.v_lv, trace.p_lv)]
    if pairs[0] != pairs[-1]:
        pairs.append(pairs[0])
    return pairs


def trace_to_csv(trace, path):
    """Export a trace as CSV with columns t, v_lv, p_lv, p_art."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "v_lv", "p_lv", "p_art"])
        for row in zip(trace.times, trace.v_lv, trace.p_lv, trace.p_art):
            writer.writerow([repr(float(x)) for x in row])
