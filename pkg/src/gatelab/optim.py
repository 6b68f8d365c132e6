"""SGD, Adam and AdaDelta over a model's named parameters, plus global-norm clipping.

Updates are applied in place to the arrays returned by ``Model.params()``.
"""
from __future__ import annotations

import numpy as np


def clip_global_norm(grads, max_norm: float):
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns ``(grads, norm_before)``.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = grads.global_norm()
    if norm > max_norm:
        grads.scale_(max_norm / norm)
    return grads, norm


class Optimizer:
    kind = ""
    slots: tuple = ()

    def __init__(self):
        self.t = 0
        self.state: dict[str, dict[str, np.ndarray]] = {s: {} for s in self.slots}

    def _slot(self, slot, name, like):
        buf = self.state[slot].get(name)
        if buf is None:
            buf = self.state[slot][name] = np.zeros_like(like)
        return buf

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        for name, p in params.items():
            self._update(name, p, grads[name])

    def hyper(self) -> dict:
        raise NotImplementedError

    def _update(self, name, p, g):
        raise NotImplementedError


class SGD(Optimizer):
    kind = "sgd"

    def __init__(self, lr: float = 0.1):
        self.lr = lr
        super().__init__()

    def hyper(self):
        return {"lr": self.lr}

    def _update(self, name, p, g):
        p -= self.lr * g


class Adam(Optimizer):
    kind = "adam"
    slots = ("m", "v")

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        super().__init__()

    def hyper(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    def _update(self, name, p, g):
        m = self._slot("m", name, p)
        v = self._slot("v", name, p)
        m *= self.beta1
        m += (1.0 - self.beta1) * g
        v *= self.beta2
        v += (1.0 - self.beta2) * g * g
        mhat = m / (1.0 - self.beta1 ** self.t)
        vhat = v / (1.0 - self.beta2 ** self.t)
        p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class AdaDelta(Optimizer):
    """Zeiler's AdaDelta; ``lr`` scales the computed step (1.0 is the original rule)."""

    kind = "adadelta"
    slots = ("sq_grad", "sq_delta")

    def __init__(self, lr: float = 1.0, rho: float = 0.95, eps: float = 1e-6):
        self.lr, self.rho, self.eps = lr, rho, eps
        super().__init__()

    def hyper(self):
        return {"lr": self.lr, "rho": self.rho, "eps": self.eps}

    def _update(self, name, p, g):
        eg = self._slot("sq_grad", name, p)
        ed = self._slot("sq_delta", name, p)
        eg *= self.rho
        eg += (1.0 - self.rho) * g * g
        delta = np.sqrt(ed + self.eps) / np.sqrt(eg + self.eps) * g
        ed *= self.rho
        ed += (1.0 - self.rho) * delta * delta
        p -= self.lr * delta


OPTIMIZERS = {cls.kind: cls for cls in (SGD, Adam, AdaDelta)}


def make_optimizer(kind: str, lr: float | None = None, **hyper) -> Optimizer:
    try:
        cls = OPTIMIZERS[kind]
    except KeyError:
        raise ValueError(f"unknown optimizer {kind!r}; choose from {sorted(OPTIMIZERS)}") from None
    if lr is not None:
        hyper["lr"] = lr
    return cls(**hyper)


def optimizer_step(opt: Optimizer, model, grads) -> None:
    opt.step(model.params(), grads)
