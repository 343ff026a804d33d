"""Joint training of the imputation VAE and the GP emulator.

The objective is a three-term evidence bound evaluated per minibatch: the
GP log marginal likelihood of the mechanistic parameters given
[observed pressures, latent draw], the Gaussian log likelihood of the
imputed features under the decoder, minus the KL between encoder and
conditional prior. One reparametrized latent draw per step keeps the
estimate unbiased; all three terms share a single tape so plain SGD
updates the VAE weights and the kernel hyperparameters together.

The GP contribution is batch-local: each minibatch is scored by an exact
GP on its own points, which keeps the cost cubic in the batch size and
the gradients exact. After the loop the GP is frozen: the reference set
is rebuilt from the full training data at posterior-mean latents and the
hyperparameters are refit for a fixed budget.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np

import cardioemu.gp as gp
import cardioemu.numerics.autodiff as ad
from cardioemu.cohort import (
    FeatureTable,
    NU_COLUMNS,
    Standardization,
    X_HAT_COLUMNS,
    X_OBS_COLUMNS,
    Y_COLUMNS,
    column_scale,
    invert_transforms,
    transform_from_json,
)
from cardioemu.cvae import ConditionalVae, gaussian_log_density, kl_terms, reparam
from cardioemu.errors import ConfigurationError, TrainingDivergedError, ValidationError
from cardioemu.numerics import Rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 128
    learning_rate: float = 2e-2
    lr_decay: float = 1.0  # per-epoch multiplicative decay
    mc_samples: int = 1
    kl_warmup_epochs: int = 50
    seed: int = 0
    gp_weight: float = 1.0
    grad_clip: float = 10.0
    latent_dim: int = 4
    hidden: tuple = (32, 32)
    gp_refit_steps: int = 200
    gp_refit_lr: float = 0.1
    gp_refit_subsample: int = 512

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ConfigurationError("mc_samples must be at least 1")
        if self.kl_warmup_epochs > self.epochs and self.epochs > 0:
            raise ConfigurationError("kl_warmup_epochs cannot exceed epochs")
        self.hidden = tuple(self.hidden)

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


@dataclass
class ElboReport:
    """Per-epoch means (over batches, per subject) of the bound and its terms."""

    rows: list = field(default_factory=list)

    def append(self, epoch, total, gp_term, recon_term, kl_term):
        self.rows.append(
            {"epoch": epoch, "total": total, "gp": gp_term, "recon": recon_term, "kl": kl_term}
        )

    def totals(self):
        return np.array([r["total"] for r in self.rows])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "total", "gp", "recon", "kl"])
            for r in self.rows:
                writer.writerow(
                    [r["epoch"], repr(r["total"]), repr(r["gp"]), repr(r["recon"]), repr(r["kl"])]
                )


def kl_warmup_weight(epoch, warmup_epochs):
    """Linear ramp from 0 at epoch 0 to 1 after the warm-up."""
    if warmup_epochs <= 0:
        return 1.0
    return min(1.0, epoch / warmup_epochs)


def batch_arrays(table, rows=None):
    """Standardized model-facing arrays from a feature table."""
    sub = table if rows is None else table.take(rows)
    return {
        "x_obs": sub.matrix(X_OBS_COLUMNS),
        "nu": sub.matrix(NU_COLUMNS),
        "x_hat": sub.matrix(X_HAT_COLUMNS),
        "y": sub.matrix(Y_COLUMNS),
    }


def elbo_batch(vae, gp_hyper, batch, rng, *, mc_samples=1, kl_weight=1.0, gp_weight=1.0,
               tape=None, vae_params=None, gp_raws=None):
    """Evidence bound of one batch; returns (objective, parts).

    The objective applies the term weights (so warm-up schedules act on the
    gradient); ``parts`` reports the raw per-subject terms and their
    unweighted total. With a tape and parameter nodes the objective is
    differentiable; otherwise it is a plain float.
    """
    x_obs, nu, x_hat, y = batch["x_obs"], batch["nu"], batch["x_hat"], batch["y"]
    n = x_obs.shape[0]
    if n < 2:
        raise ConfigurationError("elbo_batch needs at least 2 subjects for the GP term")
    if vae_params is None:
        enc_p = pri_p = dec_p = None
        alpha, beta, noise = (
            np.asarray(gp_hyper.alpha),
            np.asarray(gp_hyper.beta),
            np.asarray(gp_hyper.noise),
        )
    else:
        enc_p, pri_p, dec_p = vae.forward_params(vae_params)
        raw_alpha, raw_beta, raw_noise = gp_raws
        alpha = [gp.positive(a) for a in raw_alpha]
        beta = [[gp.positive(b) for b in row] for row in raw_beta]
        noise = [gp.positive(s) for s in raw_noise]

    q_mu, q_lv = vae.encode(x_obs, nu, params=enc_p)
    p_mu, p_lv = vae.prior_latent(nu, params=pri_p)
    kl_total = ad.asum(kl_terms(q_mu, q_lv, p_mu, p_lv))

    obs_sq_diffs = [ad.outer_sq_diff(x_obs[:, i]) for i in range(x_obs.shape[1])]
    n_targets = y.shape[1]
    latent = vae.latent_dim

    recon_acc = None
    gp_acc = None
    for _ in range(mc_samples):
        eps = rng.standard_normal((n, latent))
        z = reparam(q_mu, q_lv, eps)
        d_mu, d_lv = vae.decode(z, nu, params=dec_p)
        recon_s = ad.asum(gaussian_log_density(x_hat, d_mu, d_lv))
        z_sq_diffs = [ad.outer_sq_diff(ad.column(z, l)) for l in range(latent)]
        sq_diffs = obs_sq_diffs + z_sq_diffs
        gp_s = None
        for j in range(n_targets):
            lml_j = gp.log_marginal_likelihood(
                None, y[:, j], alpha[j], beta[j], noise[j], sq_diffs=sq_diffs
            )
            gp_s = lml_j if gp_s is None else gp_s + lml_j
        recon_acc = recon_s if recon_acc is None else recon_acc + recon_s
        gp_acc = gp_s if gp_acc is None else gp_acc + gp_s
    recon_total = recon_acc / float(mc_samples)
    gp_total = gp_acc / float(mc_samples)

    objective = gp_weight * gp_total + recon_total - kl_weight * kl_total
    gp_v, recon_v, kl_v = (float(ad.value_of(t)) for t in (gp_total, recon_total, kl_total))
    parts = {
        "gp": gp_v / n,
        "recon": recon_v / n,
        "kl": kl_v / n,
        "total": (gp_v + recon_v - kl_v) / n,
        "batch_size": n,
    }
    return objective, parts


def _gp_raw_nodes(tape, hyper):
    raw_alpha = [tape.var(hyper.raw_alpha[j]) for j in range(hyper.n_targets)]
    raw_beta = [
        [tape.var(hyper.raw_beta[j, i]) for i in range(hyper.n_predictors)]
        for j in range(hyper.n_targets)
    ]
    raw_noise = [tape.var(hyper.raw_noise[j]) for j in range(hyper.n_targets)]
    return raw_alpha, raw_beta, raw_noise


@dataclass
class JointModel:
    """Trained CVAE + frozen GP plus everything needed to reproduce them."""

    vae: ConditionalVae
    gp_model: gp.GPModel
    config: TrainConfig
    transforms: dict
    train_subject_ids: np.ndarray
    cohort_hash: str = ""

    def to_json(self):
        return {
            "vae": self.vae.to_json(),
            "gp": self.gp_model.to_json(),
            "config": self.config.to_json(),
            "transforms": {
                name: [t.to_json() for t in chain] for name, chain in self.transforms.items()
            },
            "train_subject_ids": self.train_subject_ids.tolist(),
            "cohort_hash": self.cohort_hash,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            vae=ConditionalVae.from_json(obj["vae"]),
            gp_model=gp.GPModel.from_json(obj["gp"]),
            config=TrainConfig.from_json(obj["config"]),
            transforms={
                name: [transform_from_json(t) for t in chain]
                for name, chain in obj["transforms"].items()
            },
            train_subject_ids=np.array(obj["train_subject_ids"], dtype=np.int64),
            cohort_hash=obj.get("cohort_hash", ""),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def _require_standardized(table):
    for name in FeatureTable.modeling_columns():
        chain = table.transforms.get(name, [])
        if not chain or not isinstance(chain[-1], Standardization):
            raise ValidationError(
                f"column {name!r} is not standardized; run fit_transforms first"
            )


def train(complete, config):
    """Minibatch SGD on the joint bound over the complete partition.

    Returns the JointModel (with frozen GP) and the per-epoch ElboReport.
    A non-finite objective aborts with the last epoch's parameters
    attached to the raised error.
    """
    _require_standardized(complete)
    data = batch_arrays(complete)
    n = complete.n_subjects
    master = Rng(config.seed)
    vae = ConditionalVae.create(
        x_obs_dim=len(X_OBS_COLUMNS),
        nu_dim=len(NU_COLUMNS),
        x_hat_dim=len(X_HAT_COLUMNS),
        latent_dim=config.latent_dim,
        hidden=config.hidden,
        rng=master.derive(0),
    )
    y = data["y"]
    d_inputs = len(X_OBS_COLUMNS) + config.latent_dim
    hyper = gp.KernelHyper.from_values(
        alpha=np.maximum(y.std(axis=0), 1e-3),
        beta=np.ones((y.shape[1], d_inputs)),
        noise=np.maximum(0.1 * y.std(axis=0), 1e-3),
    )

    report = ElboReport()
    if config.epochs == 0:
        model = _freeze(vae, hyper, data, config, master)
        return (
            JointModel(
                vae=vae,
                gp_model=model,
                config=config,
                transforms=complete.transforms,
                train_subject_ids=complete.subject_ids.copy(),
            ),
            report,
        )

    snapshot = None
    step_counter = 0
    for epoch in range(config.epochs):
        lr = config.learning_rate * config.lr_decay**epoch
        kl_w = kl_warmup_weight(epoch, config.kl_warmup_epochs)
        order = master.derive(1, epoch).permutation(n)
        chunks = [order[i : i + config.batch_size] for i in range(0, n, config.batch_size)]
        if len(chunks) > 1 and chunks[-1].size == 1:
            chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
            chunks.pop()
        epoch_parts = {"gp": 0.0, "recon": 0.0, "kl": 0.0, "total": 0.0}
        epoch_n = 0
        for rows in chunks:
            batch = {k: v[rows] for k, v in data.items()}
            tape = ad.Tape()
            vae_nodes = [tape.var(p) for p in vae.params()]
            gp_nodes = _gp_raw_nodes(tape, hyper)
            objective, parts = elbo_batch(
                vae, hyper, batch, master.derive(2, step_counter),
                mc_samples=config.mc_samples, kl_weight=kl_w, gp_weight=config.gp_weight,
                tape=tape, vae_params=vae_nodes, gp_raws=gp_nodes,
            )
            value = float(objective.value)
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"objective became non-finite at epoch {epoch}", checkpoint=snapshot
                )
            per_subject = objective / float(parts["batch_size"])
            all_nodes = vae_nodes + gp_nodes[0] + [b for row in gp_nodes[1] for b in row] + gp_nodes[2]
            grads = tape.gradient(per_subject, all_nodes)
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            scale = lr * (config.grad_clip / norm if norm > config.grad_clip else 1.0)
            n_vae = len(vae_nodes)
            new_params = [
                p + scale * g for p, g in zip((nd.value for nd in vae_nodes), grads[:n_vae])
            ]
            vae.set_params(new_params)
            gp_grads = grads[n_vae:]
            k = 0
            for j in range(hyper.n_targets):
                hyper.raw_alpha[j] += scale * float(gp_grads[k])
                k += 1
            for j in range(hyper.n_targets):
                for i in range(hyper.n_predictors):
                    hyper.raw_beta[j, i] += scale * float(gp_grads[k])
                    k += 1
            for j in range(hyper.n_targets):
                hyper.raw_noise[j] += scale * float(gp_grads[k])
                k += 1
            for key in ("gp", "recon", "kl", "total"):
                epoch_parts[key] += parts[key] * parts["batch_size"]
            epoch_n += parts["batch_size"]
            step_counter += 1
        report.append(
            epoch,
            epoch_parts["total"] / epoch_n,
            epoch_parts["gp"] / epoch_n,
            epoch_parts["recon"] / epoch_n,
            epoch_parts["kl"] / epoch_n,
        )
        snapshot = ([p.copy() for p in vae.params()], hyper.copy())
        if epoch % 50 == 0 or epoch == config.epochs - 1:
            log.info(
                "epoch %d: elbo %.4f (gp %.4f recon %.4f kl %.4f)",
                epoch, report.rows[-1]["total"], report.rows[-1]["gp"],
                report.rows[-1]["recon"], report.rows[-1]["kl"],
            )

    gp_model = _freeze(vae, hyper, data, config, master)
    model = JointModel(
        vae=vae,
        gp_model=gp_model,
        config=config,
        transforms=complete.transforms,
        train_subject_ids=complete.subject_ids.copy(),
    )
    return model, report


def _freeze(vae, hyper, data, config, master):
    """Rebuild the GP on the full training set at posterior-mean latents."""
    q_mu, _ = vae.encode(data["x_obs"], data["nu"])
    ref_inputs = np.hstack([data["x_obs"], q_mu])
    n = ref_inputs.shape[0]
    sub_size = min(config.gp_refit_subsample, n)
    rows = master.derive(3).permutation(n)[:sub_size]
    if config.gp_refit_steps > 0:
        refit = gp.fit(
            ref_inputs[rows],
            data["y"][rows],
            init=hyper,
            steps=config.gp_refit_steps,
            learning_rate=config.gp_refit_lr,
            target_names=Y_COLUMNS,
        )
        hyper = refit.hyper
    return gp.GPModel(
        hyper=hyper.copy(),
        ref_inputs=ref_inputs,
        ref_targets=data["y"].copy(),
        target_names=Y_COLUMNS,
    )


@dataclass
class InferResult:
    """Imputations and parameter predictions, physical and standardized."""

    x_hat_mean: np.ndarray
    x_hat_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray
    x_hat_mean_standardized: np.ndarray
    y_mean_standardized: np.ndarray


def infer(model, x_obs, nu, n_samples=16, rng=None):
    """Impute x_hat and predict y for standardized inputs.

    Draws latents from the encoder posterior; decoder means and GP
    predictions are averaged over draws, with predictive variance
    combining the model variances and the across-draw spread. Outputs are
    de-standardized through the stored transform log.
    """
    if rng is None:
        rng = Rng(0)
    if n_samples < 1:
        raise ConfigurationError("n_samples must be at least 1")
    x_obs = np.atleast_2d(x_obs)
    nu = np.atleast_2d(nu)
    q_mu, q_lv = model.vae.encode(x_obs, nu)
    dec_means, dec_vars, gp_means, gp_vars = [], [], [], []
    for _ in range(n_samples):
        eps = rng.standard_normal(q_mu.shape)
        z = q_mu + np.exp(0.5 * q_lv) * eps
        d_mu, d_lv = model.vae.decode(z, nu)
        dec_means.append(d_mu)
        dec_vars.append(np.exp(d_lv))
        g_mu, g_var = model.gp_model.predict(np.hstack([x_obs, z]))
        gp_means.append(g_mu)
        gp_vars.append(g_var)
    dec_means, dec_vars = np.stack(dec_means), np.stack(dec_vars)
    gp_means, gp_vars = np.stack(gp_means), np.stack(gp_vars)
    x_hat_mean = dec_means.mean(axis=0)
    x_hat_var = dec_vars.mean(axis=0) + dec_means.var(axis=0)
    y_mean = gp_means.mean(axis=0)
    y_var = gp_vars.mean(axis=0) + gp_means.var(axis=0)

    def destandardize(names, means, stds):
        out_mean = np.empty_like(means)
        out_std = np.empty_like(stds)
        for j, name in enumerate(names):
            chain = model.transforms[name]
            out_mean[:, j] = invert_transforms(chain, means[:, j])
            out_std[:, j] = stds[:, j] * column_scale(chain)
        return out_mean, out_std

    x_mean_phys, x_std_phys = destandardize(X_HAT_COLUMNS, x_hat_mean, np.sqrt(x_hat_var))
    y_mean_phys, y_std_phys = destandardize(Y_COLUMNS, y_mean, np.sqrt(y_var))
    return InferResult(
        x_hat_mean=x_mean_phys,
        x_hat_std=x_std_phys,
        y_mean=y_mean_phys,
        y_std=y_std_phys,
        x_hat_mean_standardized=x_hat_mean,
        y_mean_standardized=y_mean,
    )
