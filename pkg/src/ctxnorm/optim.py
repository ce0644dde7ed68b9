"""Optimizers and learning-rate schedules.

Classical momentum SGD (stands in for Nesterov in the reference recipe) and
Adam. Weight decay touches only parameters listed in a layer's
`decay_params` (dense/conv weight matrices), never biases or normalization
parameters. Schedules map training progress in [0, 1] to an lr multiplier.
"""

import numpy as np


def constant_schedule():
    return lambda progress: 1.0


def step_decay_schedule(fractions=(0.5, 0.75), factor=0.1):
    """Multiply the lr by `factor` at each listed fraction of training."""
    fractions = tuple(sorted(fractions))

    def schedule(progress):
        return factor ** sum(progress >= f for f in fractions)

    return schedule


def cosine_schedule():
    return lambda progress: 0.5 * (1.0 + np.cos(np.pi * min(progress, 1.0)))


def make_schedule(name, **kwargs):
    if name == "constant":
        return constant_schedule()
    if name == "step_decay":
        return step_decay_schedule(**kwargs)
    if name == "cosine":
        return cosine_schedule()
    raise ValueError(f"unknown schedule {name!r}")


class SgdMomentum:
    def __init__(self, lr, momentum=0.9, weight_decay=0.0, schedule=None):
        if lr < 0:
            raise ValueError("learning rate must be nonnegative")
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.schedule = schedule or constant_schedule()
        self._velocity = {}

    def step(self, model, progress=0.0):
        lr = self.lr * self.schedule(progress)
        for key, layer in model.named_parameters():
            grad = layer.grads[key[1]]
            if self.weight_decay and key[1] in getattr(layer, "decay_params", ()):
                grad = grad + self.weight_decay * layer.params[key[1]]
            vel = self._velocity.get(key)
            if vel is None:
                vel = np.zeros_like(grad)
                self._velocity[key] = vel
            vel *= self.momentum
            vel += grad
            layer.params[key[1]] -= lr * vel


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0, schedule=None):
        if lr < 0:
            raise ValueError("learning rate must be nonnegative")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.schedule = schedule or constant_schedule()
        self._m = {}
        self._v = {}
        self._t = 0

    def step(self, model, progress=0.0):
        lr = self.lr * self.schedule(progress)
        self._t += 1
        bias1 = 1.0 - self.beta1**self._t
        bias2 = 1.0 - self.beta2**self._t
        for key, layer in model.named_parameters():
            grad = layer.grads[key[1]]
            if self.weight_decay and key[1] in getattr(layer, "decay_params", ()):
                grad = grad + self.weight_decay * layer.params[key[1]]
            m = self._m.get(key, np.zeros_like(grad))
            v = self._v.get(key, np.zeros_like(grad))
            m = self.beta1 * m + (1.0 - self.beta1) * grad
            v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
            self._m[key], self._v[key] = m, v
            layer.params[key[1]] -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def make_optimizer(kind, lr, momentum=0.9, weight_decay=0.0, schedule=None, **adam_kwargs):
    if kind == "sgd_momentum":
        return SgdMomentum(lr, momentum=momentum, weight_decay=weight_decay, schedule=schedule)
    if kind == "adam":
        return Adam(lr, weight_decay=weight_decay, schedule=schedule, **adam_kwargs)
    raise ValueError(f"unknown optimizer {kind!r}")
