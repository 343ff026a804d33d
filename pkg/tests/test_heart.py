"""Forward model: physiology ranges, monotone responses, loop geometry."""

import numpy as np
import pytest

from cardioemu.errors import ValidationError
from cardioemu.heart import (
    CardiacMeasurements,
    CardiacTrace,
    LumpedParams,
    default_params,
    measure,
    pv_loop,
    simulate,
    trace_to_csv,
)


@pytest.fixture(scope="module")
def default_trace():
    return simulate(default_params())


@pytest.fixture(scope="module")
def default_measurements(default_trace):
    return measure(default_trace)


def perturbed(name, factor):
    base = default_params()
    kwargs = {k: getattr(base, k) for k in ("sigma0", "r0", "c1", "rp", "tau")}
    kwargs[name] *= factor
    return LumpedParams(**kwargs)


def shoelace_area(pairs):
    """Independent signed-area oracle for the loop polygon."""
    area = 0.0
    for (x0, y0), (x1, y1) in zip(pairs[:-1], pairs[1:]):
        area += x0 * y1 - x1 * y0
    return 0.5 * area


class TestParams:
    def test_all_positive_required(self):
        with pytest.raises(ValidationError):
            LumpedParams(sigma0=-1.0, r0=2.4, c1=1.2, rp=1.1, tau=1.6)

    def test_compliance_window(self):
        with pytest.raises(ValidationError):
            LumpedParams(sigma0=2.0, r0=2.4, c1=1.2, rp=1.1, tau=0.05)
        with pytest.raises(ValidationError):
            LumpedParams(sigma0=2.0, r0=2.4, c1=1.2, rp=0.5, tau=3.0)

    def test_unloaded_volume_from_radius(self):
        p = default_params()
        expected = 0.5 * (4.0 / 3.0) * np.pi * 2.4**3
        assert p.unloaded_volume == pytest.approx(expected)


class TestSimulate:
    def test_periodic_steady_state(self, default_trace):
        assert default_trace.converged
        assert default_trace.periodicity_error <= 0.5
        assert default_trace.cycles_run <= 30
        assert abs(default_trace.v_lv[0] - default_trace.v_lv[-1]) <= 0.5

    def test_positive_volumes_finite_pressures(self, default_trace):
        assert np.all(default_trace.v_lv > 0)
        assert np.all(np.isfinite(default_trace.p_lv))
        assert np.all(np.isfinite(default_trace.p_art))

    def test_input_validation(self):
        with pytest.raises(ValidationError):
            simulate(default_params(), heart_rate=150.0)
        with pytest.raises(ValidationError):
            simulate(default_params(), n_cycles=2)

    def test_windkessel_decay_time_constant(self, default_trace):
        # with the aortic valve closed, p_art decays with time constant tau;
        # fit the slope of log(p_art) over the part of the cycle where the
        # ventricle is clearly not ejecting
        t, p_lv, p_art = default_trace.times, default_trace.p_lv, default_trace.p_art
        closed = p_lv < p_art - 1.0
        # take the longest closed stretch, trimmed at both ends
        idx = np.flatnonzero(closed)
        splits = np.split(idx, np.where(np.diff(idx) > 1)[0] + 1)
        window = max(splits, key=len)[20:-20]
        slope = np.polyfit(t[window], np.log(p_art[window]), 1)[0]
        fitted_tau = -1.0 / slope
        assert fitted_tau == pytest.approx(default_params().tau, rel=0.05)

    def test_dt_halving_changes_measurements_little(self, default_measurements):
        m_half = measure(simulate(default_params(), dt=5e-4))
        for field in ("sv", "edv", "esv", "ef", "sbp", "dbp", "mbp"):
            a, b = getattr(default_measurements, field), getattr(m_half, field)
            assert abs(a - b) / abs(a) <= 5e-3


class TestMonotoneResponses:
    """Paired-simulation oracle: one parameter up 20 percent, rest fixed."""

    def test_rp_raises_mean_pressure(self, default_measurements):
        m = measure(simulate(perturbed("rp", 1.2)))
        assert m.mbp > default_measurements.mbp

    def test_sigma0_raises_ejection_fraction(self, default_measurements):
        m = measure(simulate(perturbed("sigma0", 1.2)))
        assert m.ef > default_measurements.ef

    def test_r0_raises_edv(self, default_measurements):
        m = measure(simulate(perturbed("r0", 1.2)))
        assert m.edv > default_measurements.edv

    def test_c1_lowers_edv(self, default_measurements):
        m = measure(simulate(perturbed("c1", 1.2)))
        assert m.edv < default_measurements.edv


class TestMeasure:
    def test_paper_mbp_formula(self):
        # dbp=80, sbp=120 -> mbp = 80 + (120 - 80) / 3
        trace = CardiacTrace(
            times=np.linspace(0, 1, 5),
            v_lv=np.array([160.0, 120.0, 60.0, 100.0, 160.0]),
            p_lv=np.array([10.0, 90.0, 110.0, 20.0, 10.0]),
            p_art=np.array([80.0, 100.0, 120.0, 90.0, 80.0]),
            cycle_length=1.0,
            converged=True,
            periodicity_error=0.0,
            cycles_run=5,
        )
        m = measure(trace)
        assert m.mbp == pytest.approx(80.0 + (120.0 - 80.0) / 3.0)
        assert m.edv == 160.0 and m.esv == 60.0

    def test_definitional_identities(self, default_measurements):
        m = default_measurements
        assert m.sv == m.edv - m.esv
        assert m.ef == m.sv / m.edv
        assert 0.0 < m.ef < 1.0
        assert m.dbp < m.mbp < m.sbp

    def test_example_values(self):
        # edv=160, esv=60 -> sv=100, ef=0.625
        m = CardiacMeasurements(sv=100.0, edv=160.0, esv=60.0, ef=100.0 / 160.0,
                                sbp=120.0, dbp=80.0, mbp=80 + 40 / 3)
        assert m.sv == m.edv - m.esv
        assert m.ef == pytest.approx(0.625)

    def test_constant_volume_trace_rejected(self):
        trace = CardiacTrace(
            times=np.linspace(0, 1, 4),
            v_lv=np.full(4, 100.0),
            p_lv=np.array([10.0, 20.0, 30.0, 10.0]),
            p_art=np.array([80.0, 90.0, 100.0, 80.0]),
            cycle_length=1.0,
            converged=True,
            periodicity_error=0.0,
            cycles_run=4,
        )
        with pytest.raises(ValidationError):
            measure(trace)

    def test_unconverged_trace_rejected(self, default_trace):
        bad = CardiacTrace(**{**default_trace.__dict__, "converged": False})
        with pytest.raises(ValidationError):
            measure(bad)


class TestPvLoop:
    def test_polygon_is_closed(self, default_trace):
        pairs = pv_loop(default_trace)
        assert pairs[0] == pairs[-1]

    def test_positive_signed_area(self, default_trace):
        assert shoelace_area(pv_loop(default_trace)) > 0.0

    def test_volume_extremes_match_measurements(self, default_trace, default_measurements):
        pairs = pv_loop(default_trace)
        volumes = [v for v, _ in pairs]
        assert min(volumes) == pytest.approx(default_measurements.esv)
        assert max(volumes) == pytest.approx(default_measurements.edv)


def test_trace_csv_round_trip(tmp_path, default_trace):
    path = tmp_path / "trace.csv"
    trace_to_csv(default_trace, path)
    data = np.genfromtxt(path, delimiter=",", names=True)
    np.testing.assert_array_equal(data["t"], default_trace.times)
    np.testing.assert_array_equal(data["v_lv"], default_trace.v_lv)
    np.testing.assert_array_equal(data["p_art"], default_trace.p_art)


def test_physiologic_ranges_at_defaults(default_measurements):
    m = default_measurements
    assert 100.0 <= m.edv <= 180.0
    assert 0.5 <= m.ef <= 0.7
    assert 100.0 <= m.sbp <= 140.0
    assert 60.0 <= m.dbp <= 90.0
