"""Cohort generation, transforms, split, and CSV round-trips."""

import numpy as np
import pytest

from cardioemu import cohort
from cardioemu.cohort import (
    FeatureTable,
    box_cox,
    fit_transforms,
    generate_cohort,
    invert_transforms,
    read_csv,
    split,
    standardize,
    write_csv,
)
from cardioemu.errors import SchemaError, ValidationError


@pytest.fixture(scope="module")
def small_cohort():
    return generate_cohort(400, seed=11)


@pytest.fixture(scope="session")
def full_cohort():
    return generate_cohort(3445, seed=7)


def sample_skewness(x):
    x = np.asarray(x, dtype=float)
    c = x - x.mean()
    return float(np.mean(c**3) / np.mean(c**2) ** 1.5)


class TestGenerate:
    def test_full_size_shape(self, full_cohort):
        assert full_cohort.n_subjects == 3445
        assert len(FeatureTable.modeling_columns()) == 16
        assert (~full_cohort.mask).sum() == 0

    def test_determinism(self):
        a = generate_cohort(60, seed=3)
        b = generate_cohort(60, seed=3)
        np.testing.assert_array_equal(a.values, b.values)
        assert not np.array_equal(a.values, generate_cohort(60, seed=4).values)

    def test_simulator_invariants_hold_per_row(self, small_cohort):
        ef = small_cohort.column("ef")
        sv = small_cohort.column("sv")
        edv = small_cohort.column("edv")
        assert np.all((ef > 0) & (ef < 1))
        np.testing.assert_array_equal(ef, sv / edv)
        dbp, mbp, sbp = (small_cohort.column(c) for c in ("dbp", "mbp", "sbp"))
        assert np.all(dbp < mbp) and np.all(mbp < sbp)
        np.testing.assert_allclose(mbp, dbp + (sbp - dbp) / 3.0)

    def test_minimum_size_enforced(self):
        with pytest.raises(ValidationError):
            generate_cohort(10, seed=0)

    def test_coupling_contracts(self, full_cohort):
        age = full_cohort.column("age")
        rp = full_cohort.column("rp")
        wmh = full_cohort.column("wmh_vol")
        sigma0 = full_cohort.column("sigma0")
        assert np.corrcoef(age, rp)[0, 1] > 0.3
        assert np.corrcoef(wmh, sigma0)[0, 1] < -0.2


class TestBoxCox:
    def test_forced_lambda_one_is_shift(self):
        x = np.array([1.0, 2.0, 5.0])
        y, t = box_cox(x, lam=1.0)
        np.testing.assert_allclose(y, x - 1.0)
        assert t.shift == 0.0

    def test_forced_lambda_zero_is_log(self):
        x = np.array([1.0, 2.0, 5.0])
        y, _ = box_cox(x, lam=0.0)
        np.testing.assert_allclose(y, np.log(x))

    def test_lognormal_selects_lambda_near_zero(self):
        rng = np.random.default_rng(5)
        _, t = box_cox(np.exp(rng.normal(size=10_000)))
        assert abs(t.lam) <= 0.2

    def test_round_trip(self):
        rng = np.random.default_rng(6)
        x = np.exp(rng.normal(size=500)) + 0.3
        y, t = box_cox(x)
        back = t.invert(y)
        assert np.max(np.abs(back - x) / np.abs(x)) <= 1e-10

    def test_negative_values_get_shifted(self):
        x = np.array([-1.0, 0.0, 3.0])
        y, t = box_cox(x)
        assert t.shift >= 1.0
        np.testing.assert_allclose(t.invert(y), x, atol=1e-9)

    def test_reduces_wmh_skewness(self, full_cohort):
        raw = full_cohort.column("wmh_vol")
        transformed, _ = box_cox(raw)
        assert abs(sample_skewness(transformed)) <= 0.5 * abs(sample_skewness(raw))


class TestStandardize:
    def test_training_columns_are_standard(self, small_cohort):
        rows = np.arange(300)
        out = standardize(small_cohort, rows)
        for name in FeatureTable.modeling_columns():
            col = out.column(name)[rows]
            assert abs(col.mean()) < 1e-10
            assert abs(col.var() - 1.0) < 1e-9

    def test_test_rows_use_training_stats(self, small_cohort):
        rows = np.arange(300)
        out = standardize(small_cohort, rows)
        # held-out rows generally have non-zero mean under training stats
        heldout = out.column("age")[300:]
        assert abs(heldout.mean()) > 1e-6

    def test_zero_variance_column_rejected(self, small_cohort):
        bad = small_cohort.copy()
        bad.values[:, bad.column_index("age")] = 55.0
        with pytest.raises(ValidationError):
            standardize(bad, np.arange(bad.n_subjects))

    def test_transform_log_inverts_exactly(self, small_cohort):
        rows = np.arange(300)
        out = fit_transforms(small_cohort, rows)
        for name in FeatureTable.modeling_columns():
            back = invert_transforms(out.transforms[name], out.column(name))
            orig = small_cohort.column(name)
            assert np.max(np.abs(back - orig) / np.maximum(np.abs(orig), 1e-12)) <= 1e-8


class TestSplit:
    def test_paper_partition_sizes(self, full_cohort):
        complete, incomplete = split(full_cohort, 2309, seed=7)
        assert complete.n_subjects == 2309
        assert incomplete.n_subjects == 1136

    def test_partitions_are_disjoint_and_cover(self, small_cohort):
        complete, incomplete = split(small_cohort, 250, seed=1)
        union = np.concatenate([complete.subject_ids, incomplete.subject_ids])
        assert len(np.unique(union)) == small_cohort.n_subjects

    def test_incomplete_masks_targets_only(self, small_cohort):
        _, incomplete = split(small_cohort, 250, seed=1)
        for name in cohort.X_HAT_COLUMNS + cohort.Y_COLUMNS:
            assert not incomplete.column_mask(name).any()
            assert np.isnan(incomplete.column(name)).all()
        for name in cohort.X_OBS_COLUMNS + cohort.NU_COLUMNS:
            assert incomplete.column_mask(name).all()

    def test_bounds(self, small_cohort):
        with pytest.raises(ValidationError):
            split(small_cohort, small_cohort.n_subjects, seed=0)


class TestCsv:
    def test_round_trip_identity(self, tmp_path, small_cohort):
        path = tmp_path / "cohort.csv"
        write_csv(small_cohort, path)
        back = read_csv(path)
        np.testing.assert_array_equal(back.subject_ids, small_cohort.subject_ids)
        np.testing.assert_array_equal(back.values, small_cohort.values)
        np.testing.assert_array_equal(back.mask, small_cohort.mask)

    def test_round_trip_with_mask_and_transforms(self, tmp_path, small_cohort):
        rows = np.arange(300)
        table = fit_transforms(small_cohort, rows)
        _, incomplete = split(table, 250, seed=2)
        path = tmp_path / "incomplete.csv"
        write_csv(incomplete, path)
        back = read_csv(path)
        assert not back.column_mask("ef").any()
        observed = back.mask
        np.testing.assert_array_equal(back.values[observed], incomplete.values[observed])
        assert back.transforms == incomplete.transforms

    def test_missing_column_reported_by_name(self, tmp_path, small_cohort):
        path = tmp_path / "cohort.csv"
        write_csv(small_cohort, path)
        text = path.read_text().replace("ef", "fraction")
        path.write_text(text)
        with pytest.raises(SchemaError, match="ef"):
            read_csv(path)

    def test_empty_cell_is_masked_not_zero(self, tmp_path, small_cohort):
        _, incomplete = split(small_cohort, 250, seed=2)
        path = tmp_path / "incomplete.csv"
        write_csv(incomplete, path)
        back = read_csv(path)
        j = back.column_index("ef")
        assert np.isnan(back.values[:, j]).all()
        assert not (back.values[:, j] == 0).any()

    def test_ragged_row_rejected(self, tmp_path, small_cohort):
        path = tmp_path / "cohort.csv"
        write_csv(small_cohort, path)
        lines = path.read_text().splitlines()
        lines[1] = ",".join(lines[1].split(",")[:-2])
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(SchemaError, match="expected"):
            read_csv(path)

    def test_non_numeric_cell_rejected(self, tmp_path, small_cohort):
        path = tmp_path / "cohort.csv"
        write_csv(small_cohort, path)
        lines = path.read_text().splitlines()
        fields = lines[1].split(",")
        fields[3] = "not-a-number"
        lines[1] = ",".join(fields)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(SchemaError, match="not-a-number"):
            read_csv(path)
