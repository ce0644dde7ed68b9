"""Context normalization layers.

Three variants over K contexts:

* ContextNorm (CN): per-(context, channel) batch moments — the BN axes
  restricted to each context's samples — with a 1/sqrt(lambda_k) rescale
  and per-context scale/shift. Running statistics per context for eval.
  With K=1 it reduces exactly to BatchNorm.
* ContextNormExtended (CN-X): same transform, but the per-context mean and
  variance are trainable weights (variance through exp(log_var), keeping
  positivity structural). No batch statistics, so the train and eval paths
  coincide and single-sample contexts are well defined.
* AdaptiveContextNorm (ACN): contexts are latent. A diagonal-GMM posterior
  over the per-position channel vector soft-assigns each activation; the
  normalization statistics are tied to the density parameters, mixture
  weights live on the simplex via softmax, and everything trains by
  backprop. Eval is the same forward with frozen parameters.

All backward passes are exact (they include the dependence of batch moments
on x where there is one) and certified against the finite-difference oracle.
"""

import numpy as np

from .gmm import log_densities, logsumexp
from .norms import NotInitializedError, moving_average, softmax
from .tensor_ops import as_ncl, masked_moments


def _check_lambdas(lambdas, k):
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if lambdas.shape != (k,):
        raise ValueError(f"lambdas shape {lambdas.shape} != ({k},)")
    if (lambdas <= 0.0).any():
        raise ValueError("every context proportion must be > 0")
    if abs(lambdas.sum() - 1.0) > 1e-9:
        raise ValueError("context proportions must sum to 1")
    return lambdas


def _check_ctx(ctx, n, k):
    ctx = np.asarray(ctx)
    if ctx.shape != (n,):
        raise ValueError(f"ctx shape {ctx.shape} != (N,) = ({n},)")
    if ctx.min() < 0 or ctx.max() >= k:
        raise ValueError(f"context id out of range [0, {k})")
    return ctx.astype(np.int64)


class ContextNorm:
    """CN: context-wise batch standardization with 1/sqrt(lambda) scaling.

    Within each context the centered/scaled activations are standardized
    (mean 0, variance 1) BEFORE the 1/sqrt(lambda_k) factor; the factor then
    scales context k's variance to 1/lambda_k, so only a single context
    (lambda=1) yields literally unit-variance outputs.
    """

    needs_context = True

    def __init__(self, channels, lambdas, momentum=0.9, eps=1e-5):
        lambdas = np.atleast_1d(np.asarray(lambdas, dtype=np.float64))
        self.k = lambdas.shape[0]
        self.lambdas = _check_lambdas(lambdas, self.k)
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.params = {
            "gamma": np.ones((self.k, channels)),
            "beta": np.zeros((self.k, channels)),
        }
        self.grads = {name: np.zeros_like(p) for name, p in self.params.items()}
        self.running_mean = np.zeros((self.k, channels))
        self.running_var = np.ones((self.k, channels))
        self.initialized = np.zeros(self.k, dtype=bool)
        self._cache = None

    def forward(self, x, ctx, training=True, update_stats=None):
        x3, shape = as_ncl(x)
        n, _, l = x3.shape
        ctx = _check_ctx(ctx, n, self.k)
        gamma, beta = self.params["gamma"], self.params["beta"]
        inv_lam = 1.0 / np.sqrt(self.lambdas)
        y = np.empty_like(x3)
        if not training:
            for k in np.unique(ctx):
                if not self.initialized[k]:
                    raise NotInitializedError(f"context {k} has no running statistics")
                sel = ctx == k
                inv = 1.0 / np.sqrt(self.running_var[k] + self.eps)
                xhat = inv_lam[k] * (x3[sel] - self.running_mean[k][None, :, None]) * inv[None, :, None]
                y[sel] = gamma[k][None, :, None] * xhat + beta[k][None, :, None]
            return y.reshape(shape)

        groups = []
        for k in np.unique(ctx):
            sel = ctx == k
            count = int(sel.sum()) * l
            if count <= 1:
                # too few activations for a batch estimate: normalize with the
                # context's running statistics and skip this step's update
                if not self.initialized[k]:
                    raise NotInitializedError(
                        f"degenerate context {k} (single activation) and no running statistics"
                    )
                inv = 1.0 / np.sqrt(self.running_var[k] + self.eps)
                xc = x3[sel] - self.running_mean[k][None, :, None]
                groups.append({"k": int(k), "sel": sel, "xc": xc, "inv": inv, "m": count, "frozen": True})
            else:
                mean, var, count = masked_moments(x3, sel)
                inv = 1.0 / np.sqrt(var + self.eps)
                xc = x3[sel] - mean[None, :, None]
                if update_stats is None or update_stats:
                    self.running_mean[k] = moving_average(self.running_mean[k], mean, self.momentum)
                    self.running_var[k] = moving_average(self.running_var[k], var, self.momentum)
                    self.initialized[k] = True
                groups.append({"k": int(k), "sel": sel, "xc": xc, "inv": inv, "m": count, "frozen": False})
            g = groups[-1]
            xhat = inv_lam[g["k"]] * g["xc"] * g["inv"][None, :, None]
            y[g["sel"]] = gamma[g["k"]][None, :, None] * xhat + beta[g["k"]][None, :, None]
        self._cache = {"groups": groups, "shape": shape, "n": n}
        return y.reshape(shape)

    def backward(self, dy):
        c = self._cache
        dy3, _ = as_ncl(dy)
        gamma = self.params["gamma"]
        inv_lam = 1.0 / np.sqrt(self.lambdas)
        self.grads["gamma"] = np.zeros_like(gamma)
        self.grads["beta"] = np.zeros_like(gamma)
        dx = np.zeros_like(dy3)
        for g in c["groups"]:
            k, sel, xc, inv, m = g["k"], g["sel"], g["xc"], g["inv"], g["m"]
            dy_k = dy3[sel]
            xhat = inv_lam[k] * xc * inv[None, :, None]
            self.grads["gamma"][k] = (dy_k * xhat).sum(axis=(0, 2))
            self.grads["beta"][k] = dy_k.sum(axis=(0, 2))
            dxhat = dy_k * gamma[k][None, :, None]
            if g["frozen"]:
                dx[sel] = dxhat * (inv_lam[k] * inv)[None, :, None]
                continue
            dvar = -0.5 * inv_lam[k] * inv**3 * (dxhat * xc).sum(axis=(0, 2))
            dmu = -inv_lam[k] * inv * dxhat.sum(axis=(0, 2)) + dvar * (-2.0 / m) * xc.sum(
                axis=(0, 2)
            )
            dx[sel] = (
                dxhat * (inv_lam[k] * inv)[None, :, None]
                + (2.0 / m) * dvar[None, :, None] * xc
                + dmu[None, :, None] / m
            )
        return dx.reshape(c["shape"])

    def state_dict(self):
        return {
            "gamma": self.params["gamma"],
            "beta": self.params["beta"],
            "lambdas": self.lambdas,
            "running_mean": self.running_mean,
            "running_var": self.running_var,
            "initialized": self.initialized,
        }

    def load_state_dict(self, state):
        self.params["gamma"] = np.asarray(state["gamma"], dtype=np.float64)
        self.params["beta"] = np.asarray(state["beta"], dtype=np.float64)
        self.lambdas = np.asarray(state["lambdas"], dtype=np.float64)
        self.running_mean = np.asarray(state["running_mean"], dtype=np.float64)
        self.running_var = np.asarray(state["running_var"], dtype=np.float64)
        self.initialized = np.asarray(state["initialized"], dtype=bool)


class ContextNormExtended:
    """CN-X: context statistics as trainable weights instead of estimates."""

    needs_context = True

    def __init__(self, channels, lambdas, rng=None, eps=1e-5):
        lambdas = np.atleast_1d(np.asarray(lambdas, dtype=np.float64))
        self.k = lambdas.shape[0]
        self.lambdas = _check_lambdas(lambdas, self.k)
        self.eps = float(eps)
        if rng is not None:
            mu = 0.5 * rng.standard_normal((self.k, channels))
        else:
            mu = np.zeros((self.k, channels))
        self.params = {
            "gamma": np.ones((self.k, channels)),
            "beta": np.zeros((self.k, channels)),
            "mu": mu,
            "log_var": np.zeros((self.k, channels)),
        }
        self.grads = {name: np.zeros_like(p) for name, p in self.params.items()}
        self._cache = None

    def forward(self, x, ctx, training=True, update_stats=None):
        # identical formula in train and eval: parameters, not batch moments
        x3, shape = as_ncl(x)
        n = x3.shape[0]
        ctx = _check_ctx(ctx, n, self.k)
        var = np.exp(self.params["log_var"])
        inv = 1.0 / np.sqrt(var + self.eps)  # (K, C)
        inv_lam = 1.0 / np.sqrt(self.lambdas)  # (K,)
        e = x3 - self.params["mu"][ctx][:, :, None]
        xhat = (inv_lam[ctx][:, None, None] * inv[ctx][:, :, None]) * e
        y = self.params["gamma"][ctx][:, :, None] * xhat + self.params["beta"][ctx][:, :, None]
        self._cache = {"ctx": ctx, "e": e, "inv": inv, "var": var, "xhat": xhat, "shape": shape}
        return y.reshape(shape)

    def backward(self, dy):
        c = self._cache
        dy3, _ = as_ncl(dy)
        ctx, e, inv, var, xhat = c["ctx"], c["e"], c["inv"], c["var"], c["xhat"]
        inv_lam = 1.0 / np.sqrt(self.lambdas)
        for name in self.grads:
            self.grads[name] = np.zeros_like(self.params[name])
        np.add.at(self.grads["gamma"], ctx, (dy3 * xhat).sum(axis=2))
        np.add.at(self.grads["beta"], ctx, dy3.sum(axis=2))
        dxhat = dy3 * self.params["gamma"][ctx][:, :, None]
        coeff = inv_lam[ctx][:, None] * inv[ctx]  # (N, C)
        np.add.at(self.grads["mu"], ctx, -dxhat.sum(axis=2) * coeff)
        dvar_rows = -0.5 * (dxhat * e).sum(axis=2) * (inv_lam[ctx][:, None] * inv[ctx] ** 3)
        dvar = np.zeros_like(var)
        np.add.at(dvar, ctx, dvar_rows)
        self.grads["log_var"] = dvar * var
        dx = dxhat * coeff[:, :, None]
        return dx.reshape(c["shape"])

    def state_dict(self):
        return {
            "gamma": self.params["gamma"],
            "beta": self.params["beta"],
            "mu": self.params["mu"],
            "log_var": self.params["log_var"],
            "lambdas": self.lambdas,
        }

    def load_state_dict(self, state):
        for name in ("gamma", "beta", "mu", "log_var"):
            self.params[name] = np.asarray(state[name], dtype=np.float64)
        self.lambdas = np.asarray(state["lambdas"], dtype=np.float64)


class AdaptiveContextNorm:
    """ACN: soft latent contexts, all mixture parameters learned by backprop.

    Each (n, l) site is a D=C observation. Posteriors are computed in log
    space from softmax mixture weights and diagonal Gaussians whose means
    and log-variances double as the normalization statistics. The output is
    the posterior-weighted affine sum_k p(k|x) (gamma_k xhat_k + beta_k)
    over per-component standardizations xhat_k, which collapses to the
    single-context formula when posteriors are one-hot.
    """

    needs_context = False

    def __init__(self, channels, n_contexts, rng=None, eps=1e-5):
        if n_contexts < 1:
            raise ValueError("need K >= 1 contexts")
        self.k = int(n_contexts)
        self.eps = float(eps)
        if rng is not None:
            means = 0.5 * rng.standard_normal((self.k, channels))
        else:
            means = np.zeros((self.k, channels))
        self.params = {
            "gamma": np.ones((self.k, channels)),
            "beta": np.zeros((self.k, channels)),
            "logit_lambda": np.zeros(self.k),
            "means": means,
            "log_var": np.zeros((self.k, channels)),
        }
        self.grads = {name: np.zeros_like(p) for name, p in self.params.items()}
        self._cache = None

    @property
    def lambdas(self):
        """Mixture proportions on the simplex with an exactly-unit float sum.

        Softmax guarantees positivity but float rounding can leave the sum
        off by an ulp; a verified sub-ulp correction restores exact unity.
        Backward uses the pure softmax Jacobian (the correction is below
        finite-difference resolution).
        """
        lam = softmax(self.params["logit_lambda"])
        s = lam.sum()
        for _ in range(4):
            if s == 1.0:
                return lam
            lam = lam / s
            s = lam.sum()
            if s == 1.0:
                return lam
            residual = 1.0 - s
            for j in np.argsort(lam):
                trial = lam.copy()
                trial[j] += residual
                if trial[j] > 0 and trial.sum() == 1.0:
                    return trial
        return lam

    def forward(self, x, ctx=None, training=True, update_stats=None):
        # no batch statistics and no running averages: eval is the same
        # forward with frozen parameters. Diagonal Gaussians are channel-
        # separable, so the density and the aggregation reduce to (M, C) x
        # (C, K) GEMMs with no (M, K, C) intermediate — this layer runs per
        # position on conv activations, where that tensor would dominate.
        x3, shape = as_ncl(x)
        n, c, l = x3.shape
        obs = x3.transpose(0, 2, 1).reshape(n * l, c)
        lam = self.lambdas
        means = self.params["means"]
        var = np.exp(self.params["log_var"])  # (K, C)
        logits = np.log(lam)[None, :] + log_densities(obs, means, var)
        post = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))  # (M, K)
        inv = 1.0 / np.sqrt(var + self.eps)  # (K, C)
        norm_coeff = inv / np.sqrt(lam)[:, None]  # (K, C): xhat_comp = diff * norm_coeff
        gamma, beta = self.params["gamma"], self.params["beta"]
        gnc = gamma * norm_coeff
        y_obs = obs * (post @ gnc) + post @ (beta - gnc * means)
        self._cache = {
            "obs_shape": (n, c, l),
            "shape": shape,
            "obs": obs,
            "var": var,
            "lam": lam,
            "post": post,
            "norm_coeff": norm_coeff,
        }
        return y_obs.reshape(n, l, c).transpose(0, 2, 1).reshape(shape)

    def xhat_components(self):
        """Per-component standardized terms from the last forward, (M, K, C)."""
        c = self._cache
        diff = c["obs"][:, None, :] - self.params["means"][None, :, :]
        return diff * c["norm_coeff"][None, :, :]

    def xhat(self):
        """Aggregated normalized activations from the last forward, (M, C)."""
        c = self._cache
        return c["obs"] * (c["post"] @ c["norm_coeff"]) - c["post"] @ (
            c["norm_coeff"] * self.params["means"]
        )

    def backward(self, dy):
        c = self._cache
        n, ch, l = c["obs_shape"]
        dy3, _ = as_ncl(dy)
        dy_obs = dy3.transpose(0, 2, 1).reshape(n * l, ch)
        obs, var, lam, post, norm_coeff = (
            c["obs"], c["var"], c["lam"], c["post"], c["norm_coeff"],
        )
        gamma, beta = self.params["gamma"], self.params["beta"]
        means = self.params["means"]
        gnc = gamma * norm_coeff  # (K, C)
        dy_x = dy_obs * obs  # (M, C)
        s1 = post.T @ dy_x  # (K, C): sum_m dy*obs weighted by posterior
        s0 = post.T @ dy_obs  # (K, C)

        self.grads["gamma"] = norm_coeff * (s1 - means * s0)
        self.grads["beta"] = s0

        # standardization path (posterior held fixed): the would-be
        # d(loss)/d(diff) tensor contracts to GEMMs of dy and dy*obs
        contraction = gnc * (s1 - means * s0)  # sum_m de * diff per (k, c)
        dvar = -0.5 * contraction / (var + self.eps)
        dlam = -0.5 * contraction.sum(axis=1) / lam
        dx_obs = dy_obs * (post @ gnc)
        dmeans = -gnc * s0

        # posterior path
        dpost = dy_x @ gnc.T + dy_obs @ (beta - gnc * means).T
        dlogits = post * (dpost - (dpost * post).sum(axis=1, keepdims=True))
        t0 = dlogits.sum(axis=0)[:, None]  # (K, 1)
        t1 = dlogits.T @ obs  # (K, C)
        t2 = dlogits.T @ (obs * obs)  # (K, C)
        dlam += dlogits.sum(axis=0) / lam
        dvar += (t2 - 2.0 * means * t1 + means * means * t0 - var * t0) / (2.0 * var * var)
        dmeans += (t1 - means * t0) / var
        dx_obs -= obs * (dlogits @ (1.0 / var)) - dlogits @ (means / var)

        # softmax simplex weights and log-variance parameterization
        self.grads["logit_lambda"] = lam * (dlam - (dlam * lam).sum())
        self.grads["log_var"] = dvar * var
        self.grads["means"] = dmeans
        return dx_obs.reshape(n, l, ch).transpose(0, 2, 1).reshape(c["shape"])

    def state_dict(self):
        return {
            "gamma": self.params["gamma"],
            "beta": self.params["beta"],
            "logit_lambda": self.params["logit_lambda"],
            "means": self.params["means"],
            "log_var": self.params["log_var"],
        }

    def load_state_dict(self, state):
        for name in self.params:
            self.params[name] = np.asarray(state[name], dtype=np.float64)


def save_state(layer, path):
    """Write a layer checkpoint as a flat binary container of named arrays.

    Round-trips bit-exactly: arrays are stored raw with shapes recorded.
    """
    np.savez(path, **{name: np.asarray(v) for name, v in layer.state_dict().items()})


def load_state(layer, path):
    with np.load(path) as payload:
        layer.load_state_dict({name: payload[name] for name in payload.files})
