"""Minimal model zoo with pluggable normalization layers.

Layers are duck-typed: `params`/`grads` dicts plus forward/backward. The
Model chains them, passing per-sample context ids to layers that declare
`needs_context`. Each architecture slot draws its init from its own child
RNG stream, so swapping the normalization kind changes only norm-layer
parameters — every other initial weight is identical for the same seed.
"""

from dataclasses import dataclass, field

import numpy as np

from .context_norms import AdaptiveContextNorm, ContextNorm, ContextNormExtended
from .norms import BatchNorm, LayerNorm, MixNorm, ModeNorm
from .rng import spawn_rngs

NORM_KINDS = ("none", "bn", "ln", "modenorm", "mixnorm", "cn", "cnx", "acn")


class Identity:
    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x, ctx=None, training=True, update_stats=None):
        return x

    def backward(self, dy):
        return dy


class ReLU:
    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x, ctx=None, training=True, update_stats=None):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class LeakyReLU:
    def __init__(self, slope=0.01):
        self.slope = float(slope)
        self.params = {}
        self.grads = {}

    def forward(self, x, ctx=None, training=True, update_stats=None):
        self._mask = x > 0
        return np.where(self._mask, x, self.slope * x)

    def backward(self, dy):
        return np.where(self._mask, dy, self.slope * dy)


class Flatten:
    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x, ctx=None, training=True, update_stats=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)


class Dense:
    """Affine layer; weight decays, bias does not.

    Default init is He-scaled; scale=0.0 gives the zero-initialized
    classifier head (exactly uniform untrained predictions).
    """

    decay_params = ("w",)

    def __init__(self, in_features, out_features, rng, scale=None):
        if scale is None:
            scale = np.sqrt(2.0 / in_features)
        self.params = {
            "w": scale * rng.standard_normal((in_features, out_features)),
            "b": np.zeros(out_features),
        }
        self.grads = {name: np.zeros_like(p) for name, p in self.params.items()}

    def forward(self, x, ctx=None, training=True, update_stats=None):
        self._x = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, dy):
        self.grads["w"] = self._x.T @ dy
        self.grads["b"] = dy.sum(axis=0)
        return dy @ self.params["w"].T


class Conv3x3:
    """3x3 convolution, stride 1, SAME padding, via 9 shifted slices."""

    decay_params = ("w",)

    def __init__(self, in_channels, out_channels, rng):
        scale = np.sqrt(2.0 / (in_channels * 9))
        self.params = {
            "w": scale * rng.standard_normal((out_channels, in_channels, 3, 3)),
            "b": np.zeros(out_channels),
        }
        self.grads = {name: np.zeros_like(p) for name, p in self.params.items()}

    def _im2col(self, x):
        n, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        cols = np.empty((n, c, 3, 3, h, w))
        for di in range(3):
            for dj in range(3):
                cols[:, :, di, dj] = xp[:, :, di : di + h, dj : dj + w]
        return cols.reshape(n, c * 9, h * w)

    def forward(self, x, ctx=None, training=True, update_stats=None):
        n, c, h, w = x.shape
        cols = self._im2col(x)  # (N, C*9, H*W)
        wmat = self.params["w"].reshape(self.params["w"].shape[0], -1)  # (O, C*9)
        out = np.matmul(wmat, cols) + self.params["b"][None, :, None]
        self._cache = (cols, x.shape)
        return out.reshape(n, -1, h, w)

    def backward(self, dy):
        cols, xshape = self._cache
        n, c, h, w = xshape
        o = self.params["w"].shape[0]
        dyf = dy.reshape(n, o, h * w)
        # batched GEMMs on strided views; avoids materializing transposes
        self.grads["w"] = np.matmul(dyf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(
            self.params["w"].shape
        )
        self.grads["b"] = dyf.sum(axis=(0, 2))
        w4 = self.params["w"]
        dxp = np.zeros((n, c, h + 2, w + 2))
        for di in range(3):
            for dj in range(3):
                contrib = np.matmul(w4[:, :, di, dj].T, dyf).reshape(n, c, h, w)
                dxp[:, :, di : di + h, dj : dj + w] += contrib
        return dxp[:, :, 1 : h + 1, 1 : w + 1]


@dataclass
class ModelSpec:
    """Architecture description: ordered layer specs plus the head.

    Layer specs: {"op": "dense", "units": int} | {"op": "conv3x3",
    "channels": int} | {"op": "relu"} | {"op": "leaky_relu"} |
    {"op": "flatten"} | {"op": "norm", "kind": <NORM_KINDS>, "contexts": K}.
    A dense classifier head to `n_classes` is appended automatically.
    """

    layers: list
    input_shape: tuple
    n_classes: int
    norm_options: dict = field(default_factory=dict)


class Model:
    def __init__(self, layers, input_shape, n_classes):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.n_classes = int(n_classes)

    @property
    def needs_context(self):
        return any(getattr(layer, "needs_context", False) for layer in self.layers)

    @property
    def stats_initialized(self):
        for layer in self.layers:
            flag = getattr(layer, "initialized", None)
            if flag is not None and not np.all(flag):
                return False
        return True

    def forward(self, x, ctx=None, training=True, update_stats=None):
        out = np.asarray(x, dtype=np.float64).reshape(-1, *self.input_shape)
        for layer in self.layers:
            if getattr(layer, "needs_context", False):
                if ctx is None:
                    raise ValueError("model contains context layers but no ctx was given")
                out = layer.forward(out, ctx, training=training, update_stats=update_stats)
            else:
                out = layer.forward(out, ctx, training=training, update_stats=update_stats)
        return out

    def backward(self, dlogits):
        grad = dlogits
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def named_parameters(self):
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                yield (i, name), layer

    def parameter_snapshot(self):
        return {key: layer.params[key[1]].copy() for key, layer in self.named_parameters()}


def mlp_spec(input_dim, n_classes, norm="none", contexts=1, hidden=(32, 32)):
    layers = []
    for units in hidden:
        layers.append({"op": "dense", "units": units})
        layers.append({"op": "norm", "kind": norm, "contexts": contexts})
        layers.append({"op": "relu"})
    return ModelSpec(layers=layers, input_shape=(int(input_dim),), n_classes=n_classes)


def cnn_spec(input_shape, n_classes, norm="none", contexts=1, channels=16, dense_units=64):
    layers = []
    for _ in range(2):
        layers.append({"op": "conv3x3", "channels": channels})
        layers.append({"op": "norm", "kind": norm, "contexts": contexts})
        layers.append({"op": "relu"})
    layers.append({"op": "flatten"})
    layers.append({"op": "dense", "units": dense_units})
    layers.append({"op": "norm", "kind": norm, "contexts": contexts})
    layers.append({"op": "relu"})
    return ModelSpec(layers=layers, input_shape=tuple(input_shape), n_classes=n_classes)


def _make_norm(kind, channels, contexts, context_assignment, rng, options):
    momentum = options.get("momentum", 0.9)
    eps = options.get("eps", 1e-5)
    if kind == "none":
        return Identity()
    if kind == "bn":
        return BatchNorm(channels, momentum=momentum, eps=eps)
    if kind == "ln":
        return LayerNorm(channels, eps=eps)
    if kind == "modenorm":
        return ModeNorm(channels, contexts, momentum=momentum, eps=eps, rng=rng)
    if kind == "mixnorm":
        return MixNorm(
            channels,
            contexts,
            momentum=momentum,
            eps=eps,
            em_interval=options.get("em_interval", 50),
            em_iters=options.get("em_iters", 5),
            rng=rng,
        )
    if kind in ("cn", "cnx"):
        if context_assignment is None:
            raise ValueError(f"norm kind {kind!r} requires a ContextAssignment")
        lambdas = context_assignment.lambdas
        if lambdas.shape[0] != contexts:
            raise ValueError(
                f"context assignment has K={lambdas.shape[0]} but spec says {contexts}"
            )
        if kind == "cn":
            return ContextNorm(channels, lambdas, momentum=momentum, eps=eps)
        return ContextNormExtended(channels, lambdas, rng=rng, eps=eps)
    if kind == "acn":
        return AdaptiveContextNorm(channels, contexts, rng=rng, eps=eps)
    raise ValueError(f"unknown norm kind {kind!r}")


def build_model(spec, seed, context_assignment=None):
    """Instantiate a Model from a spec, deterministically from the seed."""
    rngs = spawn_rngs(seed, len(spec.layers) + 1)
    layers = []
    shape = tuple(spec.input_shape)
    for slot, layer_spec in enumerate(spec.layers):
        op = layer_spec["op"]
        rng = rngs[slot]
        if op == "dense":
            if len(shape) != 1:
                raise ValueError(f"dense layer at slot {slot} needs flat input, got {shape}")
            layers.append(Dense(shape[0], layer_spec["units"], rng))
            shape = (layer_spec["units"],)
        elif op == "conv3x3":
            if len(shape) != 3:
                raise ValueError(f"conv layer at slot {slot} needs (C,H,W) input, got {shape}")
            layers.append(Conv3x3(shape[0], layer_spec["channels"], rng))
            shape = (layer_spec["channels"], shape[1], shape[2])
        elif op == "relu":
            layers.append(ReLU())
        elif op == "leaky_relu":
            layers.append(LeakyReLU())
        elif op == "flatten":
            layers.append(Flatten())
            shape = (int(np.prod(shape)),)
        elif op == "norm":
            kind = layer_spec["kind"]
            if kind not in NORM_KINDS:
                raise ValueError(f"unknown norm kind {kind!r}")
            layers.append(
                _make_norm(
                    kind,
                    shape[0],
                    layer_spec.get("contexts", 1),
                    context_assignment,
                    rng,
                    spec.norm_options,
                )
            )
        else:
            raise ValueError(f"unknown layer op {op!r}")
    if len(shape) != 1:
        raise ValueError("classifier head needs flat features; add a flatten layer")
    layers.append(Dense(shape[0], spec.n_classes, rngs[-1], scale=0.0))
    return Model(layers, spec.input_shape, spec.n_classes)
