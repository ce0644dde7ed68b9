"""Baseline normalization layers: BatchNorm, LayerNorm, ModeNorm, MixNorm.

Each layer is a plain object holding `params`/`grads` dicts and exposing
forward(x, training=...) / backward(dy). Forward caches whatever backward
needs on the instance; backward returns dx and fills `grads`. Activations
may be (N, C), (N, C, L) or (N, C, H, W); statistics are per channel unless
stated otherwise.

Denominators are sqrt(var + eps); variance is biased. Running statistics
follow mu_bar <- a*mu_bar + (1-a)*mu_batch with momentum a.
"""

import numpy as np

from .gmm import em_fit, posteriors, weighted_moments
from .tensor_ops import as_ncl, masked_moments


class NotInitializedError(RuntimeError):
    """Eval-mode statistics requested before any running update."""


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def moving_average(running, batch, momentum):
    """Momentum update of a running statistic."""
    return momentum * running + (1.0 - momentum) * batch


class BatchNorm:
    """Per-channel batch standardization with learnable scale/shift."""

    def __init__(self, channels, momentum=0.9, eps=1e-5):
        if eps < 0:
            raise ValueError("eps must be nonnegative")
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.params = {"gamma": np.ones(channels), "beta": np.zeros(channels)}
        self.grads = {"gamma": np.zeros(channels), "beta": np.zeros(channels)}
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.initialized = False
        self._cache = None

    def update_running(self, batch_mean, batch_var):
        self.running_mean = moving_average(self.running_mean, batch_mean, self.momentum)
        self.running_var = moving_average(self.running_var, batch_var, self.momentum)
        self.initialized = True

    def forward(self, x, ctx=None, training=True, update_stats=None):
        x3, shape = as_ncl(x)
        gamma, beta = self.params["gamma"], self.params["beta"]
        if not training:
            if not self.initialized:
                raise NotInitializedError("running statistics were never updated")
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            y = gamma[:, None] * (x3 - self.running_mean[:, None]) * inv[:, None]
            return (y + beta[:, None]).reshape(shape)
        n, _, l = x3.shape
        if n * l < 2:
            raise ValueError(f"degenerate batch: N*L = {n * l} < 2")
        mean, var, count = masked_moments(x3, np.ones(n, dtype=bool))
        inv = 1.0 / np.sqrt(var + self.eps)
        xc = x3 - mean[:, None]
        y = gamma[:, None] * (xc * inv[:, None]) + beta[:, None]
        if update_stats is None or update_stats:
            self.update_running(mean, var)
        self._cache = {"xc": xc, "inv": inv, "m": count, "shape": shape}
        return y.reshape(shape)

    def backward(self, dy):
        c = self._cache
        dy3, _ = as_ncl(dy)
        xc, inv, m = c["xc"], c["inv"], c["m"]
        gamma = self.params["gamma"]
        self.grads["gamma"] = (dy3 * xc * inv[:, None]).sum(axis=(0, 2))
        self.grads["beta"] = dy3.sum(axis=(0, 2))
        dxhat = dy3 * gamma[:, None]
        dvar = -0.5 * inv**3 * (dxhat * xc).sum(axis=(0, 2))
        dmu = -inv * dxhat.sum(axis=(0, 2)) + dvar * (-2.0 / m) * xc.sum(axis=(0, 2))
        dx = dxhat * inv[:, None] + (2.0 / m) * dvar[:, None] * xc + dmu[:, None] / m
        return dx.reshape(c["shape"])


class LayerNorm:
    """Per-sample standardization over all (channel, position) features."""

    def __init__(self, channels, eps=1e-5):
        if eps < 0:
            raise ValueError("eps must be nonnegative")
        self.eps = float(eps)
        self.params = {"gamma": np.ones(channels), "beta": np.zeros(channels)}
        self.grads = {"gamma": np.zeros(channels), "beta": np.zeros(channels)}
        self._cache = None

    def forward(self, x, ctx=None, training=True, update_stats=None):
        # no batch statistics: the train and eval paths coincide
        x3, shape = as_ncl(x)
        _, c, l = x3.shape
        if c * l < 2:
            raise ValueError(f"degenerate sample: C*L = {c * l} < 2")
        mean = x3.mean(axis=(1, 2))
        var = x3.var(axis=(1, 2))
        inv = 1.0 / np.sqrt(var + self.eps)
        xc = x3 - mean[:, None, None]
        gamma, beta = self.params["gamma"], self.params["beta"]
        y = gamma[None, :, None] * (xc * inv[:, None, None]) + beta[None, :, None]
        self._cache = {"xc": xc, "inv": inv, "m": c * l, "shape": shape}
        return y.reshape(shape)

    def backward(self, dy):
        c = self._cache
        dy3, _ = as_ncl(dy)
        xc, inv, m = c["xc"], c["inv"], c["m"]
        gamma = self.params["gamma"]
        self.grads["gamma"] = (dy3 * xc * inv[:, None, None]).sum(axis=(0, 2))
        self.grads["beta"] = dy3.sum(axis=(0, 2))
        dxhat = dy3 * gamma[None, :, None]
        dvar = -0.5 * inv**3 * (dxhat * xc).sum(axis=(1, 2))
        dmu = -inv * dxhat.sum(axis=(1, 2)) + dvar * (-2.0 / m) * xc.sum(axis=(1, 2))
        dx = (
            dxhat * inv[:, None, None]
            + (2.0 / m) * dvar[:, None, None] * xc
            + dmu[:, None, None] / m
        )
        return dx.reshape(c["shape"])


class ModeNorm:
    """Mixture-of-experts gated normalization over K modes.

    Gates act on the per-sample channel-mean vector through one affine map
    plus softmax. Mode moments are gate-weighted per-channel batch moments;
    each mode keeps its own running statistics for inference. With K=1 the
    gate is constant 1 and the layer reduces exactly to BatchNorm.
    """

    def __init__(self, channels, n_modes, momentum=0.9, eps=1e-5, rng=None):
        if n_modes < 1:
            raise ValueError("need K >= 1 modes")
        self.k = int(n_modes)
        self.momentum = float(momentum)
        self.eps = float(eps)
        # zero gate weights are a symmetric saddle (identical modes, zero
        # gate gradient), so break the tie with a small random map
        if rng is not None:
            gate_w = rng.standard_normal((self.k, channels)) / np.sqrt(channels)
        else:
            gate_w = np.zeros((self.k, channels))
        self.params = {
            "gamma": np.ones(channels),
            "beta": np.zeros(channels),
            "gate_weight": gate_w,
            "gate_bias": np.zeros(self.k),
        }
        self.grads = {name: np.zeros_like(p) for name, p in self.params.items()}
        self.running_mean = np.zeros((self.k, channels))
        self.running_var = np.ones((self.k, channels))
        self.initialized = False
        self._cache = None

    def _gates(self, x3):
        feats = x3.mean(axis=2)  # (N, C)
        logits = feats @ self.params["gate_weight"].T + self.params["gate_bias"]
        return softmax(logits, axis=1), feats

    def forward(self, x, ctx=None, training=True, update_stats=None):
        x3, shape = as_ncl(x)
        n, c, l = x3.shape
        gamma, beta = self.params["gamma"], self.params["beta"]
        gates, feats = self._gates(x3)
        if not training:
            if not self.initialized:
                raise NotInitializedError("running statistics were never updated")
            xhat = np.zeros_like(x3)
            for k in range(self.k):
                inv = 1.0 / np.sqrt(self.running_var[k] + self.eps)
                xhat += gates[:, k, None, None] * (
                    (x3 - self.running_mean[k][None, :, None]) * inv[None, :, None]
                )
            y = gamma[:, None] * xhat + beta[:, None]
            return y.reshape(shape)

        totals = gates.sum(axis=0)  # (K,)
        mus = np.empty((self.k, c))
        sigmas = np.empty((self.k, c))
        xhat = np.zeros_like(x3)
        for k in range(self.k):
            nk = l * totals[k]
            mus[k] = np.einsum("n,ncl->c", gates[:, k], x3) / nk
            centered = x3 - mus[k][None, :, None]
            sigmas[k] = np.einsum("n,ncl->c", gates[:, k], centered * centered) / nk
            inv = 1.0 / np.sqrt(sigmas[k] + self.eps)
            xhat += gates[:, k, None, None] * (centered * inv[None, :, None])
        y = gamma[:, None] * xhat + beta[:, None]
        if update_stats is None or update_stats:
            self.running_mean = moving_average(self.running_mean, mus, self.momentum)
            self.running_var = moving_average(self.running_var, sigmas, self.momentum)
            self.initialized = True
        self._cache = {
            "x3": x3,
            "gates": gates,
            "feats": feats,
            "mus": mus,
            "vars": sigmas,
            "totals": totals,
            "xhat": xhat,
            "shape": shape,
        }
        return y.reshape(shape)

    def backward(self, dy):
        c = self._cache
        dy3, _ = as_ncl(dy)
        x3, gates, mus, vars, totals = c["x3"], c["gates"], c["mus"], c["vars"], c["totals"]
        n, _, l = x3.shape
        gamma = self.params["gamma"]
        self.grads["gamma"] = (dy3 * c["xhat"]).sum(axis=(0, 2))
        self.grads["beta"] = dy3.sum(axis=(0, 2))
        dxhat = dy3 * gamma[:, None]

        dgates = np.zeros_like(gates)
        dx = np.zeros_like(x3)
        t = x3.sum(axis=2)  # (N, C)
        for k in range(self.k):
            nk = l * totals[k]
            gk = gates[:, k]
            inv = 1.0 / np.sqrt(vars[k] + self.eps)
            centered = x3 - mus[k][None, :, None]
            # normalize stage
            dgates[:, k] += np.einsum("ncl,ncl->n", dxhat, centered * inv[None, :, None])
            dmu = -inv * np.einsum("ncl,n->c", dxhat, gk)
            dvar = -0.5 * inv**3 * np.einsum("ncl,n,ncl->c", dxhat, gk, centered)
            dx += dxhat * gk[:, None, None] * inv[None, :, None]
            # weighted variance stage
            dx += (2.0 / nk) * dvar[None, :, None] * gk[:, None, None] * centered
            dmu += dvar * (-2.0 / nk) * np.einsum("n,ncl->c", gk, centered)
            dgates[:, k] += ((centered * centered).sum(axis=2) - l * vars[k][None, :]) @ (
                dvar / nk
            )
            # weighted mean stage
            dx += gk[:, None, None] * dmu[None, :, None] / nk
            dgates[:, k] += (t - l * mus[k][None, :]) @ (dmu / nk)
        # gate network
        dlogits = gates * (dgates - (dgates * gates).sum(axis=1, keepdims=True))
        self.grads["gate_weight"] = dlogits.T @ c["feats"]
        self.grads["gate_bias"] = dlogits.sum(axis=0)
        dfeats = dlogits @ self.params["gate_weight"]
        dx += dfeats[:, :, None] / l
        return dx.reshape(c["shape"])


class MixNorm:
    """GMM-posterior aggregated normalization.

    Each (n, l) site is a D=C observation. Posteriors come from a diagonal
    GMM fitted by EM (never by backprop); batch moments are posterior-
    weighted. Backward treats posteriors, mixture weights and moments as
    constants, so dx flows only through the explicit x_i term.

    During harness training the GMM is refitted (warm-started) every
    `em_interval` steps with `em_iters` EM iterations; inference uses
    momentum running averages of the weighted moments with fresh posteriors.
    """

    def __init__(
        self,
        channels,
        n_components,
        momentum=0.9,
        eps=1e-5,
        em_interval=50,
        em_iters=5,
        rng=None,
        auto_em=True,
    ):
        if n_components < 1:
            raise ValueError("need K >= 1 components")
        self.k = int(n_components)
        self.channels = int(channels)
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.em_interval = int(em_interval)
        self.em_iters = int(em_iters)
        self.auto_em = bool(auto_em)
        self._rng = rng
        self.gmm = None
        self.params = {"gamma": np.ones(channels), "beta": np.zeros(channels)}
        self.grads = {"gamma": np.zeros(channels), "beta": np.zeros(channels)}
        self.running_mean = np.zeros((self.k, channels))
        self.running_var = np.ones((self.k, channels))
        self.initialized = False
        self._step = 0
        self._cache = None

    def refresh_gmm(self, obs):
        self.gmm = em_fit(obs, self.k, self._rng, max_iters=self.em_iters, init=self.gmm)

    def _batch_moments(self, obs, post):
        # a component the batch assigns ~zero responsibility contributes
        # nothing to the aggregation, so its own GMM parameters stand in for
        # the undefined batch moments
        present = post.sum(axis=0) > 1e-12
        if present.all():
            return weighted_moments(obs, post)
        mu = self.gmm.means.copy()
        var = self.gmm.diag_vars.copy()
        if present.any():
            mu_p, var_p = weighted_moments(obs, post[:, present])
            mu[present] = mu_p
            var[present] = var_p
        return mu, var

    def forward(self, x, ctx=None, training=True, update_stats=None):
        x3, shape = as_ncl(x)
        n, c, l = x3.shape
        obs = x3.transpose(0, 2, 1).reshape(n * l, c)
        if training and self.auto_em:
            if self.gmm is None or (self.em_interval > 0 and self._step % self.em_interval == 0):
                self.refresh_gmm(obs)
            self._step += 1
        if self.gmm is None:
            raise NotInitializedError("no GMM fitted; call refresh_gmm or set .gmm")
        post = posteriors(obs, self.gmm)  # (M, K)
        if training:
            mu, var = self._batch_moments(obs, post)
            if update_stats is None or update_stats:
                self.running_mean = moving_average(self.running_mean, mu, self.momentum)
                self.running_var = moving_average(self.running_var, var, self.momentum)
                self.initialized = True
        else:
            if not self.initialized:
                raise NotInitializedError("running statistics were never updated")
            mu, var = self.running_mean, self.running_var
        inv_lam = 1.0 / np.sqrt(self.gmm.weights)  # (K,)
        inv = inv_lam[:, None] / np.sqrt(var + self.eps)  # (K, C), with 1/sqrt(lam)
        scale = post @ inv
        shift = post @ (mu * inv)
        xhat = scale * obs - shift
        gamma, beta = self.params["gamma"], self.params["beta"]
        y = gamma[None, :] * xhat + beta[None, :]
        self._cache = {
            "xhat": xhat,
            "scale": scale,
            "shift": shift,
            "posteriors": post,
            "mu": mu,
            "var": var,
            "shape": shape,
            "ncl": (n, c, l),
        }
        return y.reshape(n, l, c).transpose(0, 2, 1).reshape(shape)

    def backward(self, dy):
        c = self._cache
        n, ch, l = c["ncl"]
        dy3, _ = as_ncl(dy)
        dy_obs = dy3.transpose(0, 2, 1).reshape(n * l, ch)
        self.grads["gamma"] = (dy_obs * c["xhat"]).sum(axis=0)
        self.grads["beta"] = dy_obs.sum(axis=0)
        dx_obs = dy_obs * self.params["gamma"][None, :] * c["scale"]
        return dx_obs.reshape(n, l, ch).transpose(0, 2, 1).reshape(c["shape"])
