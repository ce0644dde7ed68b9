"""Finite-difference certification of every hand-written backward pass.

For each layer kind a random input (and random, non-identity parameters)
is drawn, the loss is sum(forward(x) * T) for a fixed probe tensor T, and
every analytic gradient is compared against the central-difference oracle.
MixNorm's dx is checked under its stop-gradient contract: the oracle
differentiates a forward whose posteriors and moments are frozen.
"""

import numpy as np

from .context_norms import AdaptiveContextNorm, ContextNorm, ContextNormExtended
from .gmm import GmmParams
from .norms import BatchNorm, LayerNorm, MixNorm, ModeNorm
from .rng import make_rng
from .tensor_ops import finite_diff_grad, relative_error

LAYER_KINDS = ("bn", "ln", "modenorm", "mixnorm", "cn", "cnx", "acn")
DEFAULT_TOLERANCE = 1e-5
ACN_TOLERANCE = 1e-4


def _random_simplex(rng, k):
    w = rng.uniform(0.5, 1.5, size=k)
    return w / w.sum()


def _build(kind, rng, n, c, l, k, eps):
    """Layer instance plus (x, ctx) for one gradcheck run."""
    x = rng.standard_normal((n, c, l))
    ctx = rng.permutation(np.arange(n) % k)
    if kind == "bn":
        layer, ctx = BatchNorm(c, eps=eps), None
    elif kind == "ln":
        layer, ctx = LayerNorm(c, eps=eps), None
    elif kind == "modenorm":
        layer, ctx = ModeNorm(c, k, eps=eps, rng=rng), None
    elif kind == "mixnorm":
        layer = MixNorm(c, k, eps=eps, auto_em=False)
        layer.gmm = GmmParams(
            weights=_random_simplex(rng, k),
            means=rng.standard_normal((k, c)),
            diag_vars=rng.uniform(0.5, 1.5, size=(k, c)),
        )
        ctx = None
    elif kind == "cn":
        layer = ContextNorm(c, _random_simplex(rng, k), eps=eps)
    elif kind == "cnx":
        layer = ContextNormExtended(c, _random_simplex(rng, k), rng=rng, eps=eps)
        layer.params["log_var"] = 0.3 * rng.standard_normal((k, c))
    elif kind == "acn":
        layer = AdaptiveContextNorm(c, k, rng=rng, eps=eps)
        layer.params["logit_lambda"] = 0.5 * rng.standard_normal(k)
        layer.params["log_var"] = 0.3 * rng.standard_normal((k, c))
        ctx = None
    else:
        raise ValueError(f"unknown layer kind {kind!r}")
    # non-identity scale/shift so gradient coupling through gamma is exercised
    layer.params["gamma"] = rng.uniform(0.5, 1.5, size=layer.params["gamma"].shape)
    layer.params["beta"] = rng.standard_normal(layer.params["beta"].shape)
    return layer, x, ctx


def check_layer(kind, seed, n=4, c=3, l=2, k=2, eps=1e-3, h=1e-5):
    """Relative errors (analytic vs finite differences) per gradient name."""
    rng = make_rng(seed)
    layer, x, ctx = _build(kind, rng, n, c, l, k, eps)
    probe = rng.standard_normal((n, c, l))

    def loss(arr):
        return float((layer.forward(arr, ctx, training=True) * probe).sum())

    y = layer.forward(x, ctx, training=True)
    dx = layer.backward(probe)
    analytic = {"x": dx, **{name: g.copy() for name, g in layer.grads.items()}}

    errors = {}
    if kind == "mixnorm":
        # stop-gradient contract: freeze posteriors and moments, then
        # differentiate the explicit x_i path only
        scale = layer._cache["scale"].copy()
        shift = layer._cache["shift"].copy()
        gamma = layer.params["gamma"].copy()
        beta = layer.params["beta"].copy()

        def frozen_loss(arr):
            obs = arr.transpose(0, 2, 1).reshape(-1, c)
            y_obs = gamma[None, :] * (scale * obs - shift) + beta[None, :]
            y_frozen = y_obs.reshape(n, l, c).transpose(0, 2, 1)
            return float((y_frozen * probe).sum())

        errors["x"] = relative_error(analytic["x"], finite_diff_grad(frozen_loss, x.copy(), h))
    else:
        errors["x"] = relative_error(analytic["x"], finite_diff_grad(loss, x.copy(), h))
    for name in layer.grads:
        fd = finite_diff_grad(lambda _arr: loss(x), layer.params[name], h)
        errors[name] = relative_error(analytic[name], fd)
    return errors


def tolerance_for(kind):
    return ACN_TOLERANCE if kind == "acn" else DEFAULT_TOLERANCE


def run_suite(seeds=range(5), n=4, c=3, l=2, k=2, eps=1e-3, tolerance=None):
    """Check every layer over several seeds.

    Returns (rows, all_ok) where each row is (kind, worst error, tolerance,
    ok flag).
    """
    rows = []
    all_ok = True
    for kind in LAYER_KINDS:
        tol = tolerance if tolerance is not None else tolerance_for(kind)
        worst = 0.0
        for seed in seeds:
            errors = check_layer(kind, seed, n=n, c=c, l=l, k=k, eps=eps)
            worst = max(worst, max(errors.values()))
        ok = worst <= tol
        all_ok &= ok
        rows.append({"layer": kind, "max_rel_err": worst, "tolerance": tol, "ok": ok})
    return rows, all_ok
