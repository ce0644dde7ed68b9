"""Diagonal Gaussian mixture models: density, posteriors, EM fitting.

Observations are rows of an (n, D) matrix. Covariances are diagonal by
design: with activation vectors of dimension D = C, full covariance is both
expensive and singular at small batch sizes, while the diagonal keeps the
density and every gradient tractable. Variances are floored at VAR_FLOOR to
rule out degenerate spikes.
"""

from dataclasses import dataclass

import numpy as np

from .contexts import kmeans_plusplus

VAR_FLOOR = 1e-6
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class GmmParams:
    """Mixture weights, component means and diagonal variances."""

    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    diag_vars: np.ndarray  # (K, D)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.diag_vars = np.asarray(self.diag_vars, dtype=np.float64)
        if self.means.shape != self.diag_vars.shape or self.weights.shape != (self.k,):
            raise ValueError("inconsistent GMM parameter shapes")
        if (self.weights <= 0.0).any():
            raise ValueError("invalid mixture: every weight must be > 0")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to 1")
        if (self.diag_vars < VAR_FLOOR).any():
            raise ValueError(f"diagonal variances must be >= {VAR_FLOOR}")

    @property
    def k(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def copy(self):
        return GmmParams(self.weights.copy(), self.means.copy(), self.diag_vars.copy())


def logsumexp(a, axis=-1, keepdims=False):
    """Stable log(sum(exp(a))); exact for rows that are all -inf."""
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def gaussian_logpdf(x, mean, diag_var):
    """Log density of a diagonal-covariance multivariate normal at x.

    -1/2 * sum_d [log(2 pi var_d) + (x_d - mean_d)^2 / var_d]
    """
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    diag_var = np.asarray(diag_var, dtype=np.float64)
    if (diag_var <= 0.0).any():
        raise ValueError("diag_var must be positive")
    diff = x - mean
    return float(-0.5 * (np.log(2.0 * np.pi * diag_var) + diff * diff / diag_var).sum())


def log_densities(x, means, diag_vars):
    """Per-component log densities for a batch: (n, K).

    Expanded quadratic (x^2 - 2 x mu + mu^2 per dim), so the whole batch is
    three GEMMs instead of an (n, K, D) intermediate.
    """
    x = np.asarray(x, dtype=np.float64)
    ivar = 1.0 / diag_vars  # (K, D)
    quad = (
        (x * x) @ ivar.T
        - 2.0 * x @ (means * ivar).T
        + (means * means * ivar).sum(axis=1)[None, :]
    )
    logdet = (LOG_2PI + np.log(diag_vars)).sum(axis=1)  # (K,)
    return -0.5 * (logdet[None, :] + quad)


def posteriors(x, gmm):
    """Row-stochastic membership probabilities p(k | x_i), shape (n, K).

    Computed in log space so rows sum to 1 even for points far into the
    tails of every component.
    """
    a = np.log(gmm.weights)[None, :] + log_densities(x, gmm.means, gmm.diag_vars)
    return np.exp(a - logsumexp(a, axis=1, keepdims=True))


def data_loglik(x, gmm):
    """Total log-likelihood of the data under the mixture."""
    a = np.log(gmm.weights)[None, :] + log_densities(x, gmm.means, gmm.diag_vars)
    return float(logsumexp(a, axis=1).sum())


def weighted_moments(x, resp):
    """Responsibility-weighted mean and biased variance per component.

    Responsibilities are row-normalized first (a no-op for true posteriors,
    but the estimator then also accepts unnormalized weights), and moments
    are normalized by each component's total weight, so one-hot rows give
    ordinary per-group moments.
    """
    x = np.asarray(x, dtype=np.float64)
    resp = np.asarray(resp, dtype=np.float64)
    if (resp < 0.0).any():
        raise ValueError("responsibilities must be nonnegative")
    row_sums = resp.sum(axis=1)
    if (row_sums <= 0.0).any():
        raise ValueError("every sample needs positive total responsibility")
    w = resp / row_sums[:, None]
    totals = w.sum(axis=0)  # (K,)
    if (totals <= 0.0).any():
        empty = np.flatnonzero(totals <= 0.0).tolist()
        raise ValueError(f"components {empty} received zero responsibility")
    mu = np.einsum("nk,nd->kd", w, x) / totals[:, None]
    centered = x[:, None, :] - mu[None, :, :]
    var = np.einsum("nk,nkd->kd", w, centered * centered) / totals[:, None]
    return mu, var


def em_step(x, gmm):
    """One EM iteration. Returns (updated params, pre-step log-likelihood).

    A component whose total responsibility falls below 1e-12 is reseeded at
    the point the current mixture explains worst (lowest likelihood), with
    the global diagonal variance and weight 1/n.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < gmm.k:
        raise ValueError(f"need at least K={gmm.k} points, got {n}")
    a = np.log(gmm.weights)[None, :] + log_densities(x, gmm.means, gmm.diag_vars)
    point_ll = logsumexp(a, axis=1)
    loglik = float(point_ll.sum())
    resp = np.exp(a - point_ll[:, None])

    totals = resp.sum(axis=0)
    collapsed = totals < 1e-12
    safe = np.maximum(totals, 1e-300)
    weights = totals / n
    means = np.einsum("nk,nd->kd", resp, x) / safe[:, None]
    centered = x[:, None, :] - means[None, :, :]
    diag_vars = np.einsum("nk,nkd->kd", resp, centered * centered) / safe[:, None]
    diag_vars = np.maximum(diag_vars, VAR_FLOOR)

    if collapsed.any():
        global_var = np.maximum(x.var(axis=0), VAR_FLOOR)
        worst_first = np.argsort(point_ll)
        for slot, k in enumerate(np.flatnonzero(collapsed)):
            means[k] = x[worst_first[slot % n]]
            diag_vars[k] = global_var
            weights[k] = 1.0 / n
        weights = weights / weights.sum()

    return GmmParams(weights, means, diag_vars), loglik


def em_fit(x, k, rng, max_iters=100, tol=1e-6, init=None):
    """Fit a diagonal GMM by EM.

    Seeds means with k-means++ draws from `rng` (skipped when `init` warm
    starts from previous parameters), then iterates em_step until the
    absolute log-likelihood change drops below `tol` or max_iters is hit.
    Deterministic given the seed.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < k:
        raise ValueError(f"need at least K={k} points, got {x.shape[0]}")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if init is not None:
        gmm = init.copy()
    else:
        means = kmeans_plusplus(x, k, rng)
        global_var = np.maximum(x.var(axis=0), VAR_FLOOR)
        gmm = GmmParams(
            weights=np.full(k, 1.0 / k),
            means=means,
            diag_vars=np.tile(global_var, (k, 1)),
        )
    prev = None
    for _ in range(int(max_iters)):
        gmm, loglik = em_step(x, gmm)
        if prev is not None and abs(loglik - prev) < tol:
            break
        prev = loglik
    return gmm
