"""Dense float64 tensor helpers.

Creation with deterministic fills, the masked per-channel moment reduction
every batch-statistic layer is built on, and the central finite-difference
gradient oracle the hand-written backward passes are certified against.

All arithmetic is 64-bit; variance is always the biased (divide-by-count)
estimator.
"""

import numpy as np


def tensor_create(shape, fill=0.0, rng=None):
    """Create a C-contiguous float64 array of the given shape.

    `fill` is a constant scalar, ("uniform", lo, hi) or ("normal", mean, std);
    the distribution fills draw from `rng`.
    """
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise ValueError(f"all extents must be >= 1, got shape {shape}")
    if np.isscalar(fill):
        return np.full(shape, float(fill), dtype=np.float64)
    kind = fill[0]
    if rng is None:
        raise ValueError(f"fill kind {kind!r} requires an rng")
    if kind == "uniform":
        _, lo, hi = fill
        return rng.uniform(lo, hi, size=shape).astype(np.float64)
    if kind == "normal":
        _, mean, std = fill
        return (mean + std * rng.standard_normal(shape)).astype(np.float64)
    raise ValueError(f"unknown fill kind {kind!r}")


def as_ncl(x):
    """Canonicalize activations to (N, C, L).

    Accepts (N, C), (N, C, L) or (N, C, H, W); spatial dims are flattened
    once at layer entry. Returns the 3-D view and the original shape.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[:, :, None], x.shape
    if x.ndim == 3:
        return x, x.shape
    if x.ndim == 4:
        n, c, h, w = x.shape
        return x.reshape(n, c, h * w), x.shape
    raise ValueError(f"expected 2-4 dims (N,C[,L|H,W]), got shape {x.shape}")


def masked_moments(x, mask):
    """Per-channel mean and biased variance over the selected samples.

    x: (N, C, L) or (N, C); mask: (N,) boolean. Statistics for channel c
    run over every (n, l) site with mask[n] true. Returns (mean[C], var[C],
    count) where count is the number of sites aggregated per channel.
    """
    x3, _ = as_ncl(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (x3.shape[0],):
        raise ValueError(f"mask shape {mask.shape} != (N,) = ({x3.shape[0]},)")
    if not mask.any():
        raise ValueError("empty selection: mask has no true entries")
    sel = x3[mask]
    mean = sel.mean(axis=(0, 2))
    var = sel.var(axis=(0, 2))
    return mean, var, sel.shape[0] * sel.shape[2]


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of a scalar function, element by element.

    Perturbs `x` in place (restoring it) and re-evaluates f, so f must read
    the array it is handed each call. This oracle is intentionally
    independent of every analytic backward pass it checks.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(
                f"non-finite function value at element {i} (f+={fp}, f-={fm})"
            )
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b):
    """max |a-b| scaled by the larger gradient magnitude (floor 1e-8)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def assert_finite(arr, what="array"):
    """Raise instead of letting NaN/Inf propagate silently."""
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values in {what}")
    return arr
