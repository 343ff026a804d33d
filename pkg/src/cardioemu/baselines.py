"""Baseline imputers and the evaluation protocol.

Mean/median/KNN fills for the missing cardiac features, squared-error
tables in standardized units (so features share one error scale), and the
rank-sum comparison of error distributions with Bonferroni correction.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.spatial.distance
import scipy.stats

from cardioemu.cohort import NU_COLUMNS, X_HAT_COLUMNS, X_OBS_COLUMNS
from cardioemu.errors import ConfigurationError, ValidationError
from cardioemu.numerics import Rng

log = logging.getLogger(__name__)

EXACT_MIN_N = 20  # exact rank-sum enumeration below this per-sample size
MAX_TIE_ENUMERATION = 200_000  # full permutation budget when ties are present
KNN_GRID = (1, 2, 5, 10, 20, 50)


# --- imputers -------------------------------------------------------------------


def _target_matrix(table):
    # C-contiguous so summation order (hence bits) matches between the
    # k = n_train neighbor average and the plain column mean
    values = np.ascontiguousarray(table.matrix(X_HAT_COLUMNS))
    mask = np.column_stack([table.column_mask(c) for c in X_HAT_COLUMNS])
    if not mask.all():
        raise ValidationError("training x_hat columns must be fully observed")
    if values.shape[0] == 0:
        raise ValidationError("training table is empty")
    return values


def impute_mean(train, test):
    """Fill every test row with the training column means."""
    fill = _target_matrix(train).mean(axis=0)
    return np.tile(fill, (test.n_subjects, 1))


def impute_median(train, test):
    fill = np.median(_target_matrix(train), axis=0)
    return np.tile(fill, (test.n_subjects, 1))


def _knn_features(table):
    return table.matrix(X_OBS_COLUMNS + NU_COLUMNS)


def impute_knn(train, test, k):
    """Average of the k nearest training subjects' target features.

    Distances are Euclidean over the standardized (x_obs, nu) columns;
    ties on distance break toward the lower subject index. With
    k == n_train this reduces exactly to mean imputation.
    """
    if k < 1:
        raise ConfigurationError("k must be at least 1")
    n_train = train.n_subjects
    if k > n_train:
        raise ConfigurationError(f"k={k} exceeds the {n_train} training subjects")
    targets = _target_matrix(train)
    distances = scipy.spatial.distance.cdist(_knn_features(test), _knn_features(train))
    out = np.empty((test.n_subjects, targets.shape[1]))
    for i in range(test.n_subjects):
        neighbors = np.argsort(distances[i], kind="stable")[:k]
        neighbors.sort()
        out[i] = targets[neighbors].mean(axis=0)
    return out


def select_knn_k(train, ks=KNN_GRID, n_folds=10, seed=0):
    """Pick k by minimizing mean squared error over cross-validation folds.

    Returns (best_k, {k: cv_mse}); ties resolve toward the smaller k.
    """
    n = train.n_subjects
    if n_folds < 2 or n_folds > n:
        raise ConfigurationError("n_folds must be in [2, n_subjects]")
    order = Rng(seed).derive(5).permutation(n)
    folds = np.array_split(order, n_folds)
    cv_mse = {k: 0.0 for k in ks}
    counts = {k: 0 for k in ks}
    for held_out in folds:
        fit_rows = np.setdiff1d(order, held_out)
        fit_table = train.take(np.sort(fit_rows))
        val_table = train.take(np.sort(held_out))
        truth = val_table.matrix(X_HAT_COLUMNS)
        for k in ks:
            if k > fit_table.n_subjects:
                continue
            pred = impute_knn(fit_table, val_table, k)
            cv_mse[k] += float(((pred - truth) ** 2).sum())
            counts[k] += truth.size
    for k in ks:
        if counts[k] == 0:
            raise ConfigurationError(f"k={k} never fit inside the folds")
        cv_mse[k] /= counts[k]
    best_k = min(ks, key=lambda k: (cv_mse[k], k))
    return best_k, cv_mse


# --- rank-sum test ----------------------------------------------------------------


def _exact_u_distribution(n1, n2):
    """Counts of the rank-sum U statistic under H0 (no ties).

    Standard recurrence N(u; m, nb) = N(u - nb; m-1, nb) + N(u; m, nb-1)
    over the number of first-sample (m) and second-sample (nb) elements;
    returns the count of assignments giving each U value.
    """
    max_u = n1 * n2
    table = np.zeros((n2 + 1, max_u + 1))
    table[:, 0] = 1.0  # no first-sample elements: U = 0
    for _m in range(1, n1 + 1):
        new_table = np.zeros_like(table)
        new_table[0, 0] = 1.0  # no second-sample elements: U = 0
        for nb in range(1, n2 + 1):
            new_table[nb] = new_table[nb - 1]
            new_table[nb, nb:] += table[nb, : max_u + 1 - nb]
        table = new_table
    return table[n2]


def _u_statistic(a, b):
    pooled = np.concatenate([a, b])
    ranks = scipy.stats.rankdata(pooled)
    r1 = ranks[: len(a)].sum()
    return r1 - len(a) * (len(a) + 1) / 2.0


def _exact_p_enumeration(a, b, u1):
    """Permutation distribution of U with midranks (handles ties exactly)."""
    pooled = np.concatenate([a, b])
    n1 = len(a)
    ranks = scipy.stats.rankdata(pooled)
    us = []
    for combo in itertools.combinations(range(len(pooled)), n1):
        r1 = ranks[list(combo)].sum()
        us.append(r1 - n1 * (n1 + 1) / 2.0)
    us = np.asarray(us)
    eps = 1e-9
    p_low = np.mean(us <= u1 + eps)
    p_high = np.mean(us >= u1 - eps)
    return min(1.0, 2.0 * min(p_low, p_high))


def _approx_p(a, b, u1):
    n1, n2 = len(a), len(b)
    pooled = np.concatenate([a, b])
    n = n1 + n2
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = np.sum(tie_counts**3 - tie_counts) / (n * (n - 1))
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var <= 0.0:
        return 1.0
    mu = n1 * n2 / 2.0
    z = max(abs(u1 - mu) - 0.5, 0.0) / math.sqrt(var)
    return math.erfc(z / math.sqrt(2.0))


def wilcoxon_rank_sum(a, b, method="auto"):
    """Two-sided rank-sum test; returns (U statistic of ``a``, p-value).

    Exact enumeration when min(n) <= 20 (tie-free problems use the count
    recurrence, tied ones a full permutation sweep when affordable);
    otherwise a normal approximation with tie-corrected variance and
    continuity correction.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValidationError("both samples must be non-empty")
    u1 = _u_statistic(a, b)
    pooled = np.concatenate([a, b])
    if pooled.max() == pooled.min():
        return u1, 1.0
    if method not in ("auto", "exact", "approx"):
        raise ConfigurationError(f"unknown method {method!r}")
    if method == "auto":
        method = "exact" if min(a.size, b.size) <= EXACT_MIN_N else "approx"
    if method == "exact":
        has_ties = np.unique(pooled).size < pooled.size
        if not has_ties:
            counts = _exact_u_distribution(a.size, b.size)
            total = counts.sum()
            idx = int(round(u1))
            p_low = counts[: idx + 1].sum() / total
            p_high = counts[idx:].sum() / total
            return u1, min(1.0, 2.0 * min(p_low, p_high))
        if math.comb(a.size + b.size, a.size) <= MAX_TIE_ENUMERATION:
            return u1, _exact_p_enumeration(a, b, u1)
        log.warning("tied samples too large for exact enumeration; using approximation")
    return u1, _approx_p(a, b, u1)


def bonferroni(p_values, alpha):
    """Significance flags at the family-wise level alpha / m."""
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError("alpha must be in (0, 1)")
    p_values = list(p_values)
    m = len(p_values)
    return [p < alpha / m for p in p_values]


# --- evaluation table --------------------------------------------------------------


@dataclass
class EvalResult:
    """Per-method squared errors with rank-sum comparisons to a reference."""

    feature_names: tuple
    squared_errors: dict  # method -> (n_subjects, n_features)
    reference: str = "joint"
    alpha: float = 0.05
    p_values: dict = field(default_factory=dict)  # (method, feature) -> p
    flags: dict = field(default_factory=dict)  # (method, feature) -> bool

    def mean_mse(self, method):
        return self.squared_errors[method].mean(axis=0)

    def median_mse(self, method):
        return np.median(self.squared_errors[method], axis=0)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "feature", "subject", "squared_error"])
            for method in sorted(self.squared_errors):
                errors = self.squared_errors[method]
                for j, feature in enumerate(self.feature_names):
                    for i in range(errors.shape[0]):
                        writer.writerow([method, feature, i, repr(float(errors[i, j]))])

    def summary_json(self):
        out = {
            "reference": self.reference,
            "alpha": self.alpha,
            "mean_mse": {
                method: {
                    feature: float(self.mean_mse(method)[j])
                    for j, feature in enumerate(self.feature_names)
                }
                for method in sorted(self.squared_errors)
            },
            "p_values": {
                f"{method}|{feature}": float(p) for (method, feature), p in self.p_values.items()
            },
            "significant": {
                f"{method}|{feature}": bool(f) for (method, feature), f in self.flags.items()
            },
        }
        return out

    def save_summary(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary_json(), fh, indent=1)


def mse_table(truth, predictions, feature_names=X_HAT_COLUMNS):
    """Per-subject squared errors (standardized units) for each method."""
    truth = np.asarray(truth, dtype=np.float64)
    errors = {}
    for method, pred in predictions.items():
        pred = np.asarray(pred, dtype=np.float64)
        if pred.shape != truth.shape:
            raise ConfigurationError(
                f"{method}: prediction shape {pred.shape} does not match truth {truth.shape}"
            )
        errors[method] = (pred - truth) ** 2
    return EvalResult(feature_names=tuple(feature_names), squared_errors=errors)


def compare_to_reference(result, reference="joint", alpha=0.05):
    """Rank-sum p-values of every method against the reference, per feature,
    Bonferroni-corrected within each feature family."""
    if reference not in result.squared_errors:
        raise ConfigurationError(f"reference method {reference!r} missing from results")
    result.reference = reference
    result.alpha = alpha
    others = [m for m in sorted(result.squared_errors) if m != reference]
    ref_errors = result.squared_errors[reference]
    for j, feature in enumerate(result.feature_names):
        ps = []
        for method in others:
            _, p = wilcoxon_rank_sum(result.squared_errors[method][:, j], ref_errors[:, j])
            result.p_values[(method, feature)] = p
            ps.append(p)
        for method, flag in zip(others, bonferroni(ps, alpha)):
            result.flags[(method, feature)] = flag
    return result
