"""Conditional VAE for imputing the unobserved cardiac features.

Three small Gaussian MLPs: an encoder q(z | x_obs, nu), a conditional
prior p(z | nu), and a decoder p(x_hat | nu, z). Everything is Gaussian
with diagonal covariance, so sampling uses the reparametrization trick
and the KL between encoder and prior is closed form. The decoder never
sees x_obs.

Forward passes are written against the dual-dispatch ops in
``numerics.autodiff``: pass plain arrays for inference, tape nodes for
training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

import cardioemu.numerics.autodiff as ad
from cardioemu.errors import ConfigurationError, ValidationError

LOG_VAR_MIN = -12.0
LOG_VAR_MAX = 6.0
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class GaussianLatent:
    """Diagonal Gaussian over the latent space."""

    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_var = np.asarray(self.log_var, dtype=np.float64)
        if self.mu.shape != self.log_var.shape:
            raise ValidationError("mu and log_var must have matching shapes")
        if not np.all(np.isfinite(self.log_var)) or not np.all(np.isfinite(self.mu)):
            raise ValidationError("latent parameters must be finite")
        var = np.exp(self.log_var)
        if np.any(var < 1e-12) or np.any(var > 1e6):
            raise ValidationError("latent variance outside [1e-12, 1e6]")


class GaussianMlp:
    """MLP trunk with separate linear heads for mean and log-variance."""

    def __init__(self, weights, biases, mu_weight, mu_bias, logvar_weight, logvar_bias,
                 activation="tanh"):
        self.weights = weights
        self.biases = biases
        self.mu_weight = mu_weight
        self.mu_bias = mu_bias
        self.logvar_weight = logvar_weight
        self.logvar_bias = logvar_bias
        self.activation = activation
        if activation != "tanh":
            raise ConfigurationError(f"unsupported activation {activation!r}")

    @classmethod
    def create(cls, in_dim, hidden, out_dim, rng, zero_heads=True):
        """Uniform fan-in init on the trunk; heads start at zero so the
        network begins as a standard normal regardless of input."""
        weights, biases = [], []
        last = in_dim
        for width in hidden:
            bound = 1.0 / np.sqrt(last)
            weights.append(rng.uniform(-bound, bound, (last, width)))
            biases.append(np.zeros(width))
            last = width
        if zero_heads:
            mu_w = np.zeros((last, out_dim))
            lv_w = np.zeros((last, out_dim))
        else:
            bound = 1.0 / np.sqrt(last)
            mu_w = rng.uniform(-bound, bound, (last, out_dim))
            lv_w = rng.uniform(-bound, bound, (last, out_dim))
        return cls(weights, biases, mu_w, np.zeros(out_dim), lv_w, np.zeros(out_dim))

    @property
    def in_dim(self):
        return self.weights[0].shape[0] if self.weights else self.mu_weight.shape[0]

    @property
    def out_dim(self):
        return self.mu_weight.shape[1]

    def params(self):
        """All parameter arrays in a fixed order (trunk, mu head, lv head)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        out.extend([self.mu_weight, self.mu_bias, self.logvar_weight, self.logvar_bias])
        return out

    def set_params(self, arrays):
        expected = len(self.params())
        if len(arrays) != expected:
            raise ConfigurationError(f"expected {expected} parameter arrays, got {len(arrays)}")
        n_trunk = len(self.weights)
        for i in range(n_trunk):
            self.weights[i] = arrays[2 * i]
            self.biases[i] = arrays[2 * i + 1]
        self.mu_weight, self.mu_bias, self.logvar_weight, self.logvar_bias = arrays[2 * n_trunk:]

    def forward(self, x, params=None):
        """Map a batch (n, in_dim) to (mu, log_var), both (n, out_dim).

        ``params`` optionally overrides the stored arrays (e.g. with tape
        nodes) in ``self.params()`` order.
        """
        arrays = self.params() if params is None else list(params)
        n_trunk = len(self.weights)
        h = x
        for i in range(n_trunk):
            h = ad.tanh(ad.dot(h, arrays[2 * i]) + arrays[2 * i + 1])
        mu_w, mu_b, lv_w, lv_b = arrays[2 * n_trunk:]
        mu = ad.dot(h, mu_w) + mu_b
        log_var = ad.clip(ad.dot(h, lv_w) + lv_b, LOG_VAR_MIN, LOG_VAR_MAX)
        return mu, log_var

    def to_json(self):
        return {
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "mu_weight": self.mu_weight.tolist(),
            "mu_bias": self.mu_bias.tolist(),
            "logvar_weight": self.logvar_weight.tolist(),
            "logvar_bias": self.logvar_bias.tolist(),
            "activation": self.activation,
            "log_var_clamp": [LOG_VAR_MIN, LOG_VAR_MAX],
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            weights=[np.array(w) for w in obj["weights"]],
            biases=[np.array(b) for b in obj["biases"]],
            mu_weight=np.array(obj["mu_weight"]),
            mu_bias=np.array(obj["mu_bias"]),
            logvar_weight=np.array(obj["logvar_weight"]),
            logvar_bias=np.array(obj["logvar_bias"]),
            activation=obj.get("activation", "tanh"),
        )


class ConditionalVae:
    """Encoder, conditional prior, and decoder over standardized features."""

    def __init__(self, encoder, prior, decoder, latent_dim):
        self.encoder = encoder
        self.prior = prior
        self.decoder = decoder
        self.latent_dim = latent_dim

    @classmethod
    def create(cls, x_obs_dim, nu_dim, x_hat_dim, latent_dim=4, hidden=(32, 32), rng=None):
        if rng is None:
            raise ConfigurationError("an Rng is required for weight initialization")
        return cls(
            encoder=GaussianMlp.create(x_obs_dim + nu_dim, hidden, latent_dim, rng.derive(0)),
            prior=GaussianMlp.create(nu_dim, hidden, latent_dim, rng.derive(1)),
            decoder=GaussianMlp.create(nu_dim + latent_dim, hidden, x_hat_dim, rng.derive(2)),
            latent_dim=latent_dim,
        )

    def encode(self, x_obs, nu, params=None):
        """q(z | x_obs, nu); inputs must already be standardized."""
        joint = np.hstack([np.atleast_2d(x_obs), np.atleast_2d(nu)])
        if not np.all(np.isfinite(joint)):
            raise ValidationError("encoder inputs must be finite")
        return self.encoder.forward(joint, params=params)

    def prior_latent(self, nu, params=None):
        """p(z | nu)."""
        nu = np.atleast_2d(nu)
        if not np.all(np.isfinite(nu)):
            raise ValidationError("prior inputs must be finite")
        return self.prior.forward(nu, params=params)

    def decode(self, z, nu, params=None):
        """p(x_hat | nu, z); deliberately blind to x_obs."""
        nu = np.atleast_2d(nu)
        if isinstance(z, np.ndarray):
            z = np.atleast_2d(z)
            if not np.all(np.isfinite(z)):
                raise ValidationError("decoder latent input must be finite")
            joint = np.hstack([nu, z])
        else:
            joint = ad.hstack([nu, z])
        return self.decoder.forward(joint, params=params)

    def params(self):
        return self.encoder.params() + self.prior.params() + self.decoder.params()

    def param_split(self):
        """Sizes of the three per-network parameter lists."""
        return len(self.encoder.params()), len(self.prior.params()), len(self.decoder.params())

    def forward_params(self, arrays):
        """Split a flat parameter list into per-network lists."""
        n_enc, n_pri, n_dec = self.param_split()
        if len(arrays) != n_enc + n_pri + n_dec:
            raise ConfigurationError("parameter list has wrong length")
        return arrays[:n_enc], arrays[n_enc : n_enc + n_pri], arrays[n_enc + n_pri :]

    def set_params(self, arrays):
        enc, pri, dec = self.forward_params(arrays)
        self.encoder.set_params(enc)
        self.prior.set_params(pri)
        self.decoder.set_params(dec)

    def to_json(self):
        return {
            "latent_dim": self.latent_dim,
            "encoder": self.encoder.to_json(),
            "prior": self.prior.to_json(),
            "decoder": self.decoder.to_json(),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            encoder=GaussianMlp.from_json(obj["encoder"]),
            prior=GaussianMlp.from_json(obj["prior"]),
            decoder=GaussianMlp.from_json(obj["decoder"]),
            latent_dim=obj["latent_dim"],
        )


# --- Gaussian machinery --------------------------------------------------------


def kl_terms(q_mu, q_log_var, p_mu, p_log_var):
    """Elementwise closed-form KL(q || p) contributions for diagonal Gaussians."""
    diff = q_mu - p_mu
    return 0.5 * (
        ad.exp(q_log_var - p_log_var)
        + ad.square(diff) * ad.exp(-p_log_var)
        - 1.0
        + p_log_var
        - q_log_var
    )


def kl_divergence(q, p):
    """KL(q || p) between two GaussianLatent of equal dimension."""
    if q.mu.shape != p.mu.shape:
        raise ConfigurationError("latent dimensions differ")
    return float(np.sum(kl_terms(q.mu, q.log_var, p.mu, p.log_var)))


def reparam_sample(latent, rng):
    """z = mu + exp(log_var / 2) * eps with eps from ``rng``."""
    eps = rng.standard_normal(latent.mu.shape)
    return latent.mu + np.exp(0.5 * latent.log_var) * eps


def reparam(mu, log_var, eps):
    """Tape-friendly reparametrization with explicit noise."""
    return mu + ad.exp(0.5 * log_var) * eps


def gaussian_log_density(x, mu, log_var):
    """Elementwise Gaussian log density; sum over axes at the call site."""
    return -0.5 * (ad.square(x - mu) * ad.exp(-log_var) + log_var + LOG_2PI)


def impute(vae, x_obs, nu, n_samples, rng, x_hat_transforms=None):
    """Monte Carlo imputation of x_hat from (x_obs, nu).

    Draws z from the encoder posterior, averages decoder means, and
    combines decoder variance with the across-sample spread. With
    ``x_hat_transforms`` the outputs are mapped back to physical units;
    values are reported as-is, never clipped into a valid range.
    """
    if n_samples < 1:
        raise ConfigurationError("n_samples must be at least 1")
    x_obs = np.atleast_2d(x_obs)
    nu = np.atleast_2d(nu)
    q_mu, q_lv = vae.encode(x_obs, nu)
    means = []
    variances = []
    for _ in range(n_samples):
        z = reparam_sample(GaussianLatent(q_mu, q_lv), rng)
        d_mu, d_lv = vae.decode(z, nu)
        means.append(d_mu)
        variances.append(np.exp(d_lv))
    means = np.stack(means)
    variances = np.stack(variances)
    mean = means.mean(axis=0)
    total_var = variances.mean(axis=0) + means.var(axis=0)
    std = np.sqrt(total_var)
    if x_hat_transforms is not None:
        from cardioemu.cohort import column_scale, invert_transforms

        mean = np.column_stack(
            [invert_transforms(t, mean[:, j]) for j, t in enumerate(x_hat_transforms)]
        )
        std = np.column_stack(
            [std[:, j] * column_scale(t) for j, t in enumerate(x_hat_transforms)]
        )
    return mean, std


def save_checkpoint(vae, path):
    with open(path, "w") as fh:
        json.dump(vae.to_json(), fh)


def load_checkpoint(path):
    with open(path) as fh:
        return ConditionalVae.from_json(json.load(fh))
