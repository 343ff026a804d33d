"""Gaussian-process emulation of the forward-model parameters.

One independent GP per target with zero prior mean and a product RBF
kernel carrying one length scale per (predictor, target) pair, so the
fitted length scales double as relevance indicators. Hyperparameters are
learned by gradient ascent on the log marginal likelihood; gradients flow
through the same tape used everywhere else (Cholesky included).

All strictly positive quantities (amplitude, length scales, noise) are
parameterized as softplus(raw) + 1e-6.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

import cardioemu.numerics.autodiff as ad
from cardioemu.errors import ConfigurationError, TrainingDivergedError, ValidationError

log = logging.getLogger(__name__)

STD_FLOOR = 1e-6
JITTER = 1e-8
LOG_2PI = math.log(2.0 * math.pi)


def positive(raw):
    """softplus(raw) + floor; accepts arrays or tape nodes."""
    return ad.softplus(raw) + STD_FLOOR


def positive_inverse(value):
    """Raw parameter whose softplus(raw) + floor equals ``value``."""
    v = np.asarray(value, dtype=np.float64) - STD_FLOOR
    if np.any(v <= 0):
        raise ValidationError("positive parameters must exceed the 1e-6 floor")
    # inverse softplus, stable for large v
    return v + np.log1p(-np.exp(-v))


@dataclass
class KernelHyper:
    """Raw (pre-softplus) kernel hyperparameters for all targets.

    alpha: output amplitude per target, beta: one length scale per
    (predictor, target) pair, noise: observation noise std per target.
    """

    raw_alpha: np.ndarray  # (n_targets,)
    raw_beta: np.ndarray  # (n_targets, n_predictors)
    raw_noise: np.ndarray  # (n_targets,)

    @property
    def n_targets(self):
        return self.raw_alpha.shape[0]

    @property
    def n_predictors(self):
        return self.raw_beta.shape[1]

    @property
    def alpha(self):
        return positive(self.raw_alpha)

    @property
    def beta(self):
        return positive(self.raw_beta)

    @property
    def noise(self):
        return positive(self.raw_noise)

    @classmethod
    def from_values(cls, alpha, beta, noise):
        return cls(
            raw_alpha=positive_inverse(alpha),
            raw_beta=positive_inverse(beta),
            raw_noise=positive_inverse(noise),
        )

    @classmethod
    def default_init(cls, x, y):
        """Scale-aware start: amplitude/noise from target spread, length
        scales from median pairwise distances per dimension."""
        x = np.asarray(x, dtype=np.float64)
        y = np.atleast_2d(np.asarray(y, dtype=np.float64).T).T
        n_targets = y.shape[1]
        stds = y.std(axis=0)
        stds = np.maximum(stds, 1e-3)
        medians = np.empty(x.shape[1])
        for i in range(x.shape[1]):
            col = x[:, i]
            diff = np.abs(col[:, None] - col[None, :])
            medians[i] = np.median(diff[np.triu_indices_from(diff, k=1)])
        medians = np.maximum(medians, 1e-3)
        return cls.from_values(
            alpha=stds,
            beta=np.tile(medians, (n_targets, 1)),
            noise=0.1 * stds,
        )

    def copy(self):
        return KernelHyper(self.raw_alpha.copy(), self.raw_beta.copy(), self.raw_noise.copy())


def kernel(x1, x2, j, hyper):
    """Kernel value between two input vectors for target ``j``."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape or x1.ndim != 1:
        raise ConfigurationError("kernel inputs must be vectors of equal length")
    if x1.size != hyper.n_predictors:
        raise ConfigurationError(
            f"expected {hyper.n_predictors} predictors, got {x1.size}"
        )
    alpha = float(np.asarray(hyper.alpha)[j])
    beta = np.asarray(hyper.beta)[j]
    return alpha**2 * float(np.exp(-np.sum((x1 - x2) ** 2 / (2.0 * beta**2))))


def pairwise_sq_diffs(columns):
    """Per-dimension matrices of squared differences; accepts nodes."""
    return [ad.outer_sq_diff(col) for col in columns]


def gram(sq_diffs, alpha, beta_row):
    """Product-RBF Gram matrix from precomputed squared differences.

    beta_row is the per-dimension length-scale vector for one target;
    works on arrays or tape nodes.
    """
    s = None
    for i, d in enumerate(sq_diffs):
        b = beta_row[i]
        term = d * (0.5 / (b * b))
        s = term if s is None else s + term
    return (alpha * alpha) * ad.exp(-s)


def cross_gram(x_star, x_ref, alpha, beta_row):
    """Kernel matrix between test rows and reference rows (numpy only)."""
    x_star = np.asarray(x_star, dtype=np.float64)
    x_ref = np.asarray(x_ref, dtype=np.float64)
    alpha = float(alpha)
    beta_row = np.asarray(beta_row, dtype=np.float64)
    d = x_star[:, None, :] - x_ref[None, :, :]
    s = np.sum(d * d * (0.5 / beta_row**2), axis=2)
    return alpha**2 * np.exp(-s)


def log_marginal_likelihood(x, y, alpha, beta_row, noise, sq_diffs=None):
    """Gaussian log marginal likelihood of one target via Cholesky.

    Differentiable when the hyperparameters (or inputs) are tape nodes.
    ``sq_diffs`` may carry precomputed squared-difference matrices.
    """
    if sq_diffs is None:
        if isinstance(x, np.ndarray):
            columns = [x[:, i] for i in range(x.shape[1])]
        else:
            columns = x
        sq_diffs = pairwise_sq_diffs(columns)
    n = ad.value_of(y).shape[0]
    if n < 1:
        raise ConfigurationError("log marginal likelihood needs at least one point")
    k = gram(sq_diffs, alpha, beta_row)
    kn = ad.add_diag(k, noise * noise + JITTER)
    chol = ad.cholesky(kn)
    a = ad.solve_lower(chol, y)
    return (
        -0.5 * ad.asum(ad.square(a))
        - ad.asum(ad.log(ad.diagonal(chol)))
        - 0.5 * n * LOG_2PI
    )


@dataclass
class GPModel:
    """Fitted emulator: hyperparameters plus the reference set and caches."""

    hyper: KernelHyper
    ref_inputs: np.ndarray  # (n_ref, d)
    ref_targets: np.ndarray  # (n_ref, n_targets)
    target_names: tuple = ()
    chol_cache: list = None
    weight_cache: list = None  # (K + noise^2 I)^{-1} y per target

    def __post_init__(self):
        if self.chol_cache is None:
            self.rebuild_cache()

    def rebuild_cache(self):
        import scipy.linalg

        alpha = np.asarray(self.hyper.alpha)
        beta = np.asarray(self.hyper.beta)
        noise = np.asarray(self.hyper.noise)
        sq_diffs = [
            ad.outer_sq_diff(self.ref_inputs[:, i]) for i in range(self.ref_inputs.shape[1])
        ]
        self.chol_cache = []
        self.weight_cache = []
        for j in range(self.hyper.n_targets):
            k = gram(sq_diffs, alpha[j], beta[j])
            k[np.diag_indices_from(k)] += noise[j] ** 2 + JITTER
            chol = np.linalg.cholesky(k)
            a = scipy.linalg.solve_triangular(chol, self.ref_targets[:, j], lower=True)
            w = scipy.linalg.solve_triangular(chol, a, lower=True, trans="T")
            self.chol_cache.append(chol)
            self.weight_cache.append(w)

    def predict(self, x_star):
        """Posterior mean and variance per target at the given inputs.

        The returned variance includes the observation noise, so it never
        drops below noise^2 (up to roundoff) and reverts to
        alpha^2 + noise^2 far from the reference set.
        """
        import scipy.linalg

        x_star = np.atleast_2d(np.asarray(x_star, dtype=np.float64))
        if x_star.shape[1] != self.ref_inputs.shape[1]:
            raise ConfigurationError(
                f"expected {self.ref_inputs.shape[1]} input dimensions, got {x_star.shape[1]}"
            )
        alpha = np.asarray(self.hyper.alpha)
        beta = np.asarray(self.hyper.beta)
        noise = np.asarray(self.hyper.noise)
        m = x_star.shape[0]
        means = np.empty((m, self.hyper.n_targets))
        variances = np.empty((m, self.hyper.n_targets))
        for j in range(self.hyper.n_targets):
            ks = cross_gram(x_star, self.ref_inputs, alpha[j], beta[j])
            means[:, j] = ks @ self.weight_cache[j]
            v = scipy.linalg.solve_triangular(self.chol_cache[j], ks.T, lower=True)
            variances[:, j] = alpha[j] ** 2 - np.sum(v * v, axis=0) + noise[j] ** 2
        return means, variances

    def to_json(self):
        return {
            "hyper": {
                "raw_alpha": self.hyper.raw_alpha.tolist(),
                "raw_beta": self.hyper.raw_beta.tolist(),
                "raw_noise": self.hyper.raw_noise.tolist(),
            },
            "ref_inputs": self.ref_inputs.tolist(),
            "ref_targets": self.ref_targets.tolist(),
            "target_names": list(self.target_names),
        }

    @classmethod
    def from_json(cls, obj):
        hyper = KernelHyper(
            raw_alpha=np.array(obj["hyper"]["raw_alpha"]),
            raw_beta=np.array(obj["hyper"]["raw_beta"]),
            raw_noise=np.array(obj["hyper"]["raw_noise"]),
        )
        return cls(
            hyper=hyper,
            ref_inputs=np.array(obj["ref_inputs"]),
            ref_targets=np.array(obj["ref_targets"]),
            target_names=tuple(obj.get("target_names", ())),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def fit(x, y, init=None, steps=200, learning_rate=0.05, target_names=(), grad_clip=10.0):
    """Per-target gradient ascent on the (per-point) log marginal likelihood.

    Returns the fitted GPModel; the per-step objective curves are attached
    as ``model.fit_curves``. Steps that decreased the objective are counted
    and logged rather than rejected.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    n = x.shape[0]
    if n > 4000:
        raise ConfigurationError("dense GP fit is limited to 4000 points")
    hyper = (init or KernelHyper.default_init(x, y)).copy()
    sq_diffs = [ad.outer_sq_diff(x[:, i]) for i in range(x.shape[1])]
    curves = []
    for j in range(y.shape[1]):
        curve = []
        non_monotone = 0
        for step in range(steps):
            tape = ad.Tape()
            raw_a = tape.var(hyper.raw_alpha[j])
            raw_b = [tape.var(hyper.raw_beta[j, i]) for i in range(x.shape[1])]
            raw_n = tape.var(hyper.raw_noise[j])
            objective = log_marginal_likelihood(
                None,
                y[:, j],
                positive(raw_a),
                [positive(b) for b in raw_b],
                positive(raw_n),
                sq_diffs=sq_diffs,
            ) / n
            value = float(objective.value)
            if not np.isfinite(value):
                raise TrainingDivergedError(f"GP objective non-finite at step {step}")
            if curve and value < curve[-1] - 1e-12:
                non_monotone += 1
            curve.append(value)
            grads = tape.gradient(objective, [raw_a, *raw_b, raw_n])
            norm = math.sqrt(sum(float(g) ** 2 for g in grads))
            scale = learning_rate * (grad_clip / norm if norm > grad_clip else 1.0)
            hyper.raw_alpha[j] += scale * float(grads[0])
            for i in range(x.shape[1]):
                hyper.raw_beta[j, i] += scale * float(grads[1 + i])
            hyper.raw_noise[j] += scale * float(grads[-1])
        if non_monotone:
            log.debug("GP target %d: %d/%d non-monotone ascent steps", j, non_monotone, steps)
        curves.append(curve)
    model = GPModel(hyper=hyper, ref_inputs=x, ref_targets=y, target_names=tuple(target_names))
    model.fit_curves = curves
    return model
