"""Shared test helpers: independent oracles used by several suites."""

import numpy as np


def gauss_hermite_log_evidence(vae, gp_hyper, batch, n_nodes=40):
    """Log evidence of a tiny batch by tensor-product Gauss-Hermite quadrature.

    Integrates the joint likelihood (batch-local GP marginal of y, decoder
    likelihood of x_hat, conditional prior over z) over one latent
    dimension per subject, entirely with plain numpy. Supports up to a few
    subjects with latent dimension 1.
    """
    import cardioemu.gp as gp_mod

    x_obs, nu, x_hat, y = batch["x_obs"], batch["nu"], batch["x_hat"], batch["y"]
    n = x_obs.shape[0]
    assert vae.latent_dim == 1, "quadrature oracle assumes L=1"
    assert y.shape[1] == 1, "quadrature oracle assumes one GP target"

    p_mu, p_lv = vae.prior_latent(nu)
    p_mu = p_mu[:, 0]
    p_sd = np.exp(0.5 * p_lv[:, 0])

    nodes, weights = np.polynomial.hermite.hermgauss(n_nodes)
    # per-subject transformed nodes: z_s = mu_s + sqrt(2) sd_s t
    z_nodes = p_mu[:, None] + np.sqrt(2.0) * p_sd[:, None] * nodes[None, :]  # (n, G)
    log_w = np.log(weights) - 0.5 * np.log(np.pi)  # per-dim GH weight

    # decoder log-likelihood per subject per node
    dec_ll = np.empty((n, n_nodes))
    for s in range(n):
        z_col = z_nodes[s][:, None]
        nu_rep = np.tile(nu[s], (n_nodes, 1))
        d_mu, d_lv = vae.decode(z_col, nu_rep)
        dec_ll[s] = (
            -0.5 * ((x_hat[s] - d_mu) ** 2 / np.exp(d_lv) + d_lv + np.log(2 * np.pi))
        ).sum(axis=1)

    # tensor grid over subjects
    grids = np.meshgrid(*[np.arange(n_nodes)] * n, indexing="ij")
    idx = np.stack([g.ravel() for g in grids], axis=1)  # (G^n, n)
    g_total = idx.shape[0]
    z_grid = z_nodes[np.arange(n)[None, :], idx]  # (G^n, n)

    alpha = float(np.asarray(gp_hyper.alpha)[0])
    beta = np.asarray(gp_hyper.beta)[0]
    noise = float(np.asarray(gp_hyper.noise)[0])
    d_obs = x_obs.shape[1]
    # squared distances: observed dims are fixed, latent dim varies over grid
    obs_sq = np.zeros((n, n))
    for i in range(d_obs):
        diff = x_obs[:, i][:, None] - x_obs[:, i][None, :]
        obs_sq += diff**2 / (2.0 * beta[i] ** 2)
    z_diff = z_grid[:, :, None] - z_grid[:, None, :]  # (G^n, n, n)
    sq = obs_sq[None, :, :] + z_diff**2 / (2.0 * beta[d_obs] ** 2)
    k = alpha**2 * np.exp(-sq)
    k[:, np.arange(n), np.arange(n)] += noise**2 + gp_mod.JITTER

    chol = np.linalg.cholesky(k)
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    sol = np.linalg.solve(k, np.tile(y[:, 0], (g_total, 1))[:, :, None])[:, :, 0]
    quad = (sol * y[:, 0][None, :]).sum(axis=1)
    gp_ll = -0.5 * quad - 0.5 * logdet - 0.5 * n * np.log(2 * np.pi)

    log_integrand = gp_ll + dec_ll[np.arange(n)[None, :], idx].sum(axis=1)
    log_weights = log_w[idx].sum(axis=1)
    log_terms = log_integrand + log_weights
    m = log_terms.max()
    return float(m + np.log(np.exp(log_terms - m).sum()))
