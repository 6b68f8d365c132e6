"""Central finite-difference oracle and the analytic-vs-numeric comparison."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import GradStore, Model, loss_and_grad, loss_only


def finite_diff_grad(m: Model, batch, eps: float = 1e-5) -> GradStore:
    """(L(theta + eps) - L(theta - eps)) / 2 eps for every scalar parameter.

    ``batch`` is ``(x_seq, targets)``. Parameters are perturbed in place and
    restored exactly afterwards.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside [1e-7, 1e-3]")
    xs, ys = batch
    out = GradStore()
    for name, p in m.params().items():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = loss_only(m, xs, ys)
            flat[k] = orig - eps
            down = loss_only(m, xs, ys)
            flat[k] = orig
            gflat[k] = (up - down) / (2.0 * eps)
        out[name] = g
    return out


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    param: str
    index: tuple
    analytic: float
    numeric: float

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict} max_rel_err={self.max_rel_error:.3e} at {self.param}{list(self.index)} "
                f"(analytic={self.analytic:.6e} numeric={self.numeric:.6e})")


def relative_error(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def compare(analytic: dict, numeric: dict, tol: float) -> GradCheckReport:
    worst = (-1.0, "", (), 0.0, 0.0)
    for name, a in analytic.items():
        n = numeric[name]
        err = relative_error(a, n)
        k = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else ()
        if err.size and err[k] > worst[0]:
            worst = (float(err[k]), name, tuple(int(i) for i in k), float(a[k]), float(n[k]))
    return GradCheckReport(worst[0] < tol, *worst)


def gradient_check(m: Model, batch, tol: float = 1e-5, eps: float = 1e-5) -> GradCheckReport:
    if tol <= 0:
        raise ValueError("tol must be positive")
    xs, ys = batch
    _, analytic = loss_and_grad(m, xs, ys)
    numeric = finite_diff_grad(m, batch, eps)
    return compare(analytic, numeric, tol)
