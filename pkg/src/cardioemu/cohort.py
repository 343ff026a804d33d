"""Synthetic cohort generation, feature transforms, and CSV interchange.

The cohort stands in for a real population study: conditioning features
(brain volumes, lesion burden, demographics) are drawn from declared
marginals, mapped to the five mechanistic heart parameters through a
log-linear coupling with subject-level noise, and pushed through the
forward model to produce measured cardiac features. The coupling
directions (vascular burden raises peripheral resistance and lowers
contractility, aging stiffens the ventricle, ...) are fixed generator
contracts that downstream tests rely on.

Column roles:
    x_obs  observed inputs        mbp, dbp
    nu     conditioning features  brain_vol, vent_vol, wmh_vol, wmh_count, bsa, age
    x_hat  features to impute     sv, edv, ef
    y      model parameters       sigma0, r0, c1, rp, tau
    aux    bookkeeping only       sbp (mbp is derived from sbp/dbp)
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cardioemu.errors import NotConvergedError, SchemaError, ValidationError
from cardioemu.heart import _simulate_arrays
from cardioemu.numerics.rng import Rng

SCHEMA = (
    ("age", "nu"),
    ("bsa", "nu"),
    ("brain_vol", "nu"),
    ("vent_vol", "nu"),
    ("wmh_vol", "nu"),
    ("wmh_count", "nu"),
    ("dbp", "x_obs"),
    ("sbp", "aux"),
    ("mbp", "x_obs"),
    ("sv", "x_hat"),
    ("edv", "x_hat"),
    ("ef", "x_hat"),
    ("sigma0", "y"),
    ("r0", "y"),
    ("c1", "y"),
    ("rp", "y"),
    ("tau", "y"),
)
COLUMN_NAMES = tuple(name for name, _ in SCHEMA)
COLUMN_ROLES = dict(SCHEMA)
CSV_HEADER = ("subject_id",) + COLUMN_NAMES

# model-facing column orderings
X_OBS_COLUMNS = ("mbp", "dbp")
NU_COLUMNS = ("brain_vol", "vent_vol", "wmh_vol", "wmh_count", "bsa", "age")
X_HAT_COLUMNS = ("sv", "edv", "ef")
Y_COLUMNS = ("sigma0", "r0", "c1", "rp", "tau")
SKEWED_COLUMNS = ("wmh_vol", "wmh_count")

MIN_COHORT_SIZE = 50
MAX_GENERATION_RETRIES = 5

# --- generator constants -----------------------------------------------------
AGE_RANGE = (45.0, 80.0)
AGE_SD = (AGE_RANGE[1] - AGE_RANGE[0]) / math.sqrt(12.0)
AGE_MEAN = 0.5 * (AGE_RANGE[0] + AGE_RANGE[1])
BSA_MEAN, BSA_SD = 1.85, 0.18
BRAIN_MEAN, BRAIN_SD, BRAIN_AGE_SLOPE = 1.15, 0.09, -0.004
VENT_LOG_MEAN, VENT_AGE_COEF, VENT_LOG_SD = math.log(0.030), 0.30, 0.35
WMH_LOG_MEAN, WMH_AGE_COEF, WMH_VASC_COEF, WMH_LOG_SD = math.log(0.0025), 0.40, 0.55, 0.60
WMH_TOTAL_LOG_SD = math.sqrt(WMH_AGE_COEF**2 + WMH_VASC_COEF**2 + WMH_LOG_SD**2)
VENT_TOTAL_LOG_SD = math.sqrt(VENT_AGE_COEF**2 + VENT_LOG_SD**2)
COUNT_BASE, COUNT_PER_VOLUME = 3.0, 1200.0
COUNT_APPROX_MEAN, COUNT_APPROX_SD = 8.5, 5.8

NOMINAL = {"sigma0": 2.0, "r0": 2.4, "c1": 1.2, "rp": 1.1, "tau": 1.6}
# log-linear coupling weights on (age, wmh burden, ventricle size, lesion count)
COUPLING = {
    # column: (age, wmh, vent, count, noise_sd)
    "sigma0": (-0.10, -0.12, 0.0, 0.0, 0.05),
    "r0": (0.0, 0.0, 0.05, 0.05, 0.03),
    "c1": (0.10, 0.0, 0.0, 0.0, 0.06),
    "rp": (0.10, 0.12, 0.0, 0.0, 0.05),
    "tau": (-0.08, 0.0, 0.0, 0.0, 0.05),
}

EDV_NOISE_SD = 4.0
ESV_NOISE_SD = 3.0
SBP_NOISE_SD = 2.5
DBP_NOISE_SD = 2.0

GENERATION_HEART_RATE = 70.0
GENERATION_DT = 1e-3
GENERATION_CYCLES = 12


# --- transforms ---------------------------------------------------------------


@dataclass(frozen=True)
class BoxCoxTransform:
    """Power transform y = ((x + shift)^lam - 1) / lam, log for lam = 0."""

    lam: float
    shift: float

    def apply(self, x):
        shifted = np.asarray(x, dtype=np.float64) + self.shift
        if np.any(shifted[np.isfinite(shifted)] <= 0.0):
            raise ValidationError("box-cox input not strictly positive after shift")
        if self.lam == 0.0:
            return np.log(shifted)
        return (shifted**self.lam - 1.0) / self.lam

    def invert(self, y):
        y = np.asarray(y, dtype=np.float64)
        if self.lam == 0.0:
            return np.exp(y) - self.shift
        return (self.lam * y + 1.0) ** (1.0 / self.lam) - self.shift

    def to_json(self):
        return {"type": "box_cox", "lam": self.lam, "shift": self.shift}


@dataclass(frozen=True)
class Standardization:
    mean: float
    std: float

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, y):
        return np.asarray(y, dtype=np.float64) * self.std + self.mean

    def to_json(self):
        return {"type": "standardize", "mean": self.mean, "std": self.std}


def transform_from_json(obj):
    if obj["type"] == "box_cox":
        return BoxCoxTransform(lam=obj["lam"], shift=obj["shift"])
    if obj["type"] == "standardize":
        return Standardization(mean=obj["mean"], std=obj["std"])
    raise SchemaError(f"unknown transform type {obj['type']!r}")


BOX_COX_GRID = np.round(np.arange(-2.0, 2.0 + 1e-9, 0.1), 10)


def box_cox(values, lam=None):
    """Box-Cox transform with lambda chosen by grid maximum likelihood.

    A shift of max(0, 1e-6 - min) is applied first so the input is strictly
    positive. Pass ``lam`` to force a specific exponent.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValidationError("box_cox requires a non-empty vector")
    shift = max(0.0, 1e-6 - float(values.min()))
    shifted = values + shift
    if np.any(shifted <= 0.0):
        raise ValidationError("box-cox input not strictly positive after shift")
    if lam is None:
        log_sum = float(np.sum(np.log(shifted)))
        n = values.size
        best_lam, best_ll = None, -np.inf
        for candidate in BOX_COX_GRID:
            lam_c = float(candidate)
            if lam_c == 0.0:
                transformed = np.log(shifted)
            else:
                transformed = (shifted**lam_c - 1.0) / lam_c
            var = float(np.var(transformed))
            if var <= 0.0:
                continue
            ll = -0.5 * n * math.log(var) + (lam_c - 1.0) * log_sum
            if ll > best_ll:
                best_lam, best_ll = lam_c, ll
        lam = best_lam
    transform = BoxCoxTransform(lam=float(lam), shift=shift)
    return transform.apply(values), transform


# --- feature table ------------------------------------------------------------


class FeatureTable:
    """Rectangular subject-by-feature matrix with mask and transform log."""

    def __init__(self, subject_ids, values, mask=None, transforms=None):
        self.subject_ids = np.asarray(subject_ids, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)
        n = self.subject_ids.size
        if self.values.shape != (n, len(COLUMN_NAMES)):
            raise ValidationError(
                f"values must be ({n}, {len(COLUMN_NAMES)}), got {self.values.shape}"
            )
        self.mask = (
            np.ones_like(self.values, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        )
        if self.mask.shape != self.values.shape:
            raise ValidationError("mask shape must match values shape")
        self.transforms = {} if transforms is None else dict(transforms)

    @property
    def n_subjects(self):
        return self.subject_ids.size

    @staticmethod
    def column_index(name):
        try:
            return COLUMN_NAMES.index(name)
        except ValueError:
            raise SchemaError(f"unknown column {name!r}") from None

    def column(self, name):
        return self.values[:, self.column_index(name)]

    def column_mask(self, name):
        return self.mask[:, self.column_index(name)]

    def matrix(self, names):
        idx = [self.column_index(n) for n in names]
        return self.values[:, idx]

    @staticmethod
    def role_columns(role):
        return tuple(name for name, r in SCHEMA if r == role)

    @staticmethod
    def modeling_columns():
        """The 16 role-tagged columns the models consume (aux excluded)."""
        return tuple(name for name, r in SCHEMA if r != "aux")

    def copy(self):
        return FeatureTable(
            self.subject_ids.copy(),
            self.values.copy(),
            self.mask.copy(),
            {k: list(v) for k, v in self.transforms.items()},
        )

    def take(self, rows):
        rows = np.asarray(rows)
        return FeatureTable(
            self.subject_ids[rows],
            self.values[rows],
            self.mask[rows],
            {k: list(v) for k, v in self.transforms.items()},
        )


def generate_cohort(n, seed):
    """Synthesize a fully observed cohort of ``n`` subjects.

    Conditioning features come from the declared marginals; heart
    parameters follow the log-linear coupling with per-subject noise; the
    measured cardiac features are produced by forward simulation plus
    measurement noise. Subjects whose simulation fails are retried with
    fresh noise up to MAX_GENERATION_RETRIES times.
    """
    if n < MIN_COHORT_SIZE:
        raise ValidationError(f"cohort size must be at least {MIN_COHORT_SIZE}")
    master = Rng(seed)
    r_nu = master.derive(1)

    age = r_nu.uniform(*AGE_RANGE, n)
    bsa = r_nu.normal(BSA_MEAN, BSA_SD, n)
    age_std = (age - AGE_MEAN) / AGE_SD
    brain_vol = BRAIN_MEAN + BRAIN_AGE_SLOPE * (age - AGE_MEAN) + r_nu.normal(0.0, BRAIN_SD, n)
    vent_vol = np.exp(VENT_LOG_MEAN + VENT_AGE_COEF * age_std + r_nu.normal(0.0, VENT_LOG_SD, n))
    vascular = r_nu.standard_normal(n)
    wmh_vol = np.exp(
        WMH_LOG_MEAN
        + WMH_AGE_COEF * age_std
        + WMH_VASC_COEF * vascular
        + r_nu.normal(0.0, WMH_LOG_SD, n)
    )
    count_rate = np.clip(COUNT_BASE + COUNT_PER_VOLUME * wmh_vol, 0.5, 60.0)
    wmh_count = 1.0 + r_nu.poisson(count_rate).astype(np.float64)

    wmh_std = (np.log(wmh_vol) - WMH_LOG_MEAN) / WMH_TOTAL_LOG_SD
    vent_std = (np.log(vent_vol) - VENT_LOG_MEAN) / VENT_TOTAL_LOG_SD
    count_std = (wmh_count - COUNT_APPROX_MEAN) / COUNT_APPROX_SD
    drivers = np.column_stack([age_std, wmh_std, vent_std, count_std])

    def heart_params(rows, eps):
        out = {}
        for j, name in enumerate(Y_COLUMNS):
            a, w, v, k, noise_sd = COUPLING[name]
            lin = drivers[rows] @ np.array([a, w, v, k])
            out[name] = NOMINAL[name] * np.exp(lin + noise_sd * eps[:, j])
        return out

    r_noise = master.derive(2)
    params = {name: np.empty(n) for name in Y_COLUMNS}
    meas = {key: np.empty(n) for key in ("edv", "esv", "sbp", "dbp")}
    pending = np.arange(n)
    attempt = 0
    while pending.size:
        if attempt >= MAX_GENERATION_RETRIES:
            raise NotConvergedError(np.inf, attempt)
        if attempt == 0:
            coupling_eps = r_noise.standard_normal((n, 5))
            meas_eps = r_noise.standard_normal((n, 4))
        else:
            coupling_eps = np.empty((pending.size, 5))
            meas_eps = np.empty((pending.size, 4))
            for row, subject in enumerate(pending):
                child = master.derive(3, int(subject), attempt)
                coupling_eps[row] = child.standard_normal(5)
                meas_eps[row] = child.standard_normal(4)
        trial = heart_params(pending, coupling_eps)
        _, v, _, p_art, converged, failed, _, _ = _simulate_arrays(
            trial["sigma0"], trial["r0"], trial["c1"], trial["rp"], trial["tau"],
            heart_rate=GENERATION_HEART_RATE, n_cycles=GENERATION_CYCLES,
            dt=GENERATION_DT, max_cycles=30,
        )
        edv = v.max(axis=0) + EDV_NOISE_SD * meas_eps[:, 0]
        esv = v.min(axis=0) + ESV_NOISE_SD * meas_eps[:, 1]
        sbp = p_art.max(axis=0) + SBP_NOISE_SD * meas_eps[:, 2]
        dbp = p_art.min(axis=0) + DBP_NOISE_SD * meas_eps[:, 3]
        ok = converged & ~failed & (esv > 0.0) & (esv < edv) & (dbp > 0.0) & (dbp < sbp)
        done = pending[ok]
        for name in Y_COLUMNS:
            params[name][done] = trial[name][ok]
        meas["edv"][done] = edv[ok]
        meas["esv"][done] = esv[ok]
        meas["sbp"][done] = sbp[ok]
        meas["dbp"][done] = dbp[ok]
        pending = pending[~ok]
        attempt += 1

    sv = meas["edv"] - meas["esv"]
    ef = sv / meas["edv"]
    mbp = meas["dbp"] + (meas["sbp"] - meas["dbp"]) / 3.0

    columns = {
        "age": age,
        "bsa": bsa,
        "brain_vol": brain_vol,
        "vent_vol": vent_vol,
        "wmh_vol": wmh_vol,
        "wmh_count": wmh_count,
        "dbp": meas["dbp"],
        "sbp": meas["sbp"],
        "mbp": mbp,
        "sv": sv,
        "edv": meas["edv"],
        "ef": ef,
        **params,
    }
    values = np.column_stack([columns[name] for name in COLUMN_NAMES])
    return FeatureTable(np.arange(n), values)


def standardize(table, stats_rows):
    """Zero-mean unit-variance columns using statistics from ``stats_rows``.

    Statistics are computed over observed cells of the given rows only (the
    training subset) and recorded in the transform log; all rows are
    transformed with them.
    """
    out = table.copy()
    for name in FeatureTable.modeling_columns():
        j = out.column_index(name)
        col = out.values[:, j]
        stats_values = col[stats_rows][out.mask[stats_rows, j]]
        mean = float(stats_values.mean())
        std = float(stats_values.std())
        if std <= 1e-12:
            raise ValidationError(f"column {name!r} has zero variance in the stats subset")
        transform = Standardization(mean=mean, std=std)
        observed = out.mask[:, j]
        col[observed] = transform.apply(col[observed])
        out.transforms.setdefault(name, []).append(transform)
    return out


def fit_transforms(table, stats_rows):
    """Box-Cox the skewed columns, then standardize, fitting on ``stats_rows``."""
    out = table.copy()
    for name in SKEWED_COLUMNS:
        j = out.column_index(name)
        col = out.values[:, j]
        stats_values = col[stats_rows][out.mask[stats_rows, j]]
        _, transform = box_cox(stats_values)
        observed = out.mask[:, j]
        col[observed] = transform.apply(col[observed])
        out.transforms.setdefault(name, []).append(transform)
    return standardize(out, stats_rows)


def apply_transforms(table, transforms):
    """Apply an already-fitted per-column transform chain to a raw table."""
    out = table.copy()
    for name, chain in transforms.items():
        j = out.column_index(name)
        observed = out.mask[:, j]
        col = out.values[:, j]
        for transform in chain:
            col[observed] = transform.apply(col[observed])
        out.transforms[name] = list(chain)
    return out


def invert_transforms(transforms, values):
    out = np.asarray(values, dtype=np.float64)
    for transform in reversed(transforms):
        out = transform.invert(out)
    return out


def column_scale(transforms):
    """Std-dev scale factor for columns whose log is purely affine."""
    scale = 1.0
    for transform in transforms:
        if not isinstance(transform, Standardization):
            raise ValidationError("scale inversion requires affine-only transforms")
        scale *= transform.std
    return scale


def split(table, n_complete, seed):
    """Random disjoint partition into complete and incomplete tables.

    In the incomplete table every x_hat and y cell is masked and blanked;
    callers keep the original table if they need the held-back truth.
    """
    n = table.n_subjects
    if not 0 < n_complete < n:
        raise ValidationError("n_complete must be in (0, n_subjects)")
    perm = Rng(seed).derive(4).permutation(n)
    complete_rows = np.sort(perm[:n_complete])
    incomplete_rows = np.sort(perm[n_complete:])
    complete = table.take(complete_rows)
    incomplete = table.take(incomplete_rows)
    hidden = [incomplete.column_index(c) for c in X_HAT_COLUMNS + Y_COLUMNS]
    incomplete.values[:, hidden] = np.nan
    incomplete.mask[:, hidden] = False
    return complete, incomplete


# --- CSV interchange ----------------------------------------------------------


def _sidecar_path(path):
    path = Path(path)
    return path.with_name(path.stem + ".transforms.json")


def write_csv(table, path):
    """Write the cohort; masked cells become empty fields, never sentinels."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for i in range(table.n_subjects):
            row = [str(int(table.subject_ids[i]))]
            for j in range(len(COLUMN_NAMES)):
                row.append(repr(float(table.values[i, j])) if table.mask[i, j] else "")
            writer.writerow(row)
    if table.transforms:
        sidecar = {
            name: [t.to_json() for t in entries] for name, entries in table.transforms.items()
        }
        with open(_sidecar_path(path), "w") as fh:
            json.dump(sidecar, fh, indent=1)


def read_csv(path):
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = tuple(next(reader))
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if header != CSV_HEADER:
            missing = set(CSV_HEADER) - set(header)
            extra = set(header) - set(CSV_HEADER)
            detail = []
            if missing:
                detail.append(f"missing columns {sorted(missing)}")
            if extra:
                detail.append(f"unknown columns {sorted(extra)}")
            if not detail:
                detail.append("column order does not match the schema")
            raise SchemaError(f"{path}: " + "; ".join(detail))
        ids, rows, masks = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise SchemaError(f"{path}:{lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            try:
                ids.append(int(row[0]))
            except ValueError:
                raise SchemaError(f"{path}:{lineno}: subject_id {row[0]!r} is not an integer") from None
            vals = np.empty(len(COLUMN_NAMES))
            mask = np.ones(len(COLUMN_NAMES), dtype=bool)
            for j, cell in enumerate(row[1:]):
                if cell == "":
                    vals[j] = np.nan
                    mask[j] = False
                else:
                    try:
                        vals[j] = float(cell)
                    except ValueError:
                        raise SchemaError(
                            f"{path}:{lineno}: non-numeric value {cell!r} in column "
                            f"{COLUMN_NAMES[j]!r}"
                        ) from None
            rows.append(vals)
            masks.append(mask)
    transforms = {}
    sidecar = _sidecar_path(path)
    if sidecar.exists():
        with open(sidecar) as fh:
            raw = json.load(fh)
        transforms = {name: [transform_from_json(t) for t in entries] for name, entries in raw.items()}
    return FeatureTable(np.array(ids), np.array(rows), np.array(masks), transforms)
