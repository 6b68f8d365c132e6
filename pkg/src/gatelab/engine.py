"""Sequence model: unrolled forward pass, BPTT and softmax cross-entropy.

Sequences are time-major arrays: inputs ``(T, B, input_size)``; per-step
targets ``(T, B)`` or final-step targets ``(B,)``. The loss is the mean
cross-entropy over every predicted token, so gradients are batch averages.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cells
from .cells import Arch, CellConfig, CellParams
from .numkit import ContractError, Rng, init_xavier

PER_STEP = "per_step"
FINAL = "final"


class GradStore(dict):
    """Name -> gradient array, mirroring :meth:`Model.params`."""

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.values())))

    def scale_(self, factor: float) -> "GradStore":
        for g in self.values():
            g *= factor
        return self

    def zero_(self) -> "GradStore":
        for g in self.values():
            g[...] = 0.0
        return self

    def add_(self, other: "GradStore", factor: float = 1.0) -> "GradStore":
        for k, g in self.items():
            g += factor * other[k]
        return self


@dataclass
class Model:
    cfg: CellConfig
    cell: CellParams
    W_out: np.ndarray      # (n_classes, hidden)
    b_out: np.ndarray
    loss_kind: str = PER_STEP

    @classmethod
    def create(cls, cfg: CellConfig, n_classes: int, rng: Rng, loss_kind: str = PER_STEP) -> "Model":
        if loss_kind not in (PER_STEP, FINAL):
            raise ValueError(f"unknown loss kind {loss_kind!r}")
        cell = CellParams.initialize(cfg, rng)
        W_out = init_xavier(n_classes, cfg.hidden_size, rng)
        return cls(cfg, cell, W_out, np.zeros(n_classes), loss_kind)

    @property
    def n_classes(self) -> int:
        return self.W_out.shape[0]

    def params(self) -> dict:
        """Every learnable array by name. Entries are views: in-place edits update the model."""
        out = self.cell.named(self.cfg.blocks)
        out["W_out"] = self.W_out
        out["b_out"] = self.b_out
        return out

    def zero_grads(self) -> GradStore:
        return GradStore({k: np.zeros_like(v) for k, v in self.params().items()})

    def copy(self) -> "Model":
        return Model(self.cfg, self.cell.copy(), self.W_out.copy(), self.b_out.copy(), self.loss_kind)


@dataclass
class State:
    h: np.ndarray
    c: np.ndarray | None = None


def zero_state(m: Model, batch: int) -> State:
    H = m.cfg.hidden_size
    c = np.zeros((batch, H)) if m.cfg.arch is Arch.LSTM else None
    return State(np.zeros((batch, H)), c)


def _as_sequence(x_seq) -> np.ndarray:
    xs = np.asarray(x_seq, dtype=np.float64)
    if xs.ndim == 2:  # (T, input) -> single-member batch
        xs = xs[:, None, :]
    if xs.ndim != 3 or xs.shape[0] == 0:
        raise ContractError(f"expected a nonempty (T, B, input) sequence, got shape {xs.shape}")
    return xs


def unroll_forward(m: Model, x_seq, state: State | None = None, keep_caches: bool = True):
    """Run the cell over the whole sequence.

    Returns ``(h_seq, logits, caches)``: ``h_seq`` is ``(T, B, H)``, logits are
    ``(T, B, K)`` for per-step heads and ``(B, K)`` for final-step heads.
    With ``keep_caches=False`` only the last step's cache is kept.
    """
    xs = _as_sequence(x_seq)
    if xs.shape[2] != m.cfg.input_size:
        raise ContractError(f"input width {xs.shape[2]} != input_size {m.cfg.input_size}")
    T, B, _ = xs.shape
    if state is None:
        state = zero_state(m, B)
    h, c = state.h, state.c
    caches = []
    h_seq = np.empty((T, B, m.cfg.hidden_size))
    for t in range(T):
        h, c, cache = cells.step_forward(m.cell, m.cfg, xs[t], h, c)
        if keep_caches or t == T - 1:
            caches.append(cache)
        h_seq[t] = h
    if m.loss_kind == PER_STEP:
        logits = h_seq @ m.W_out.T + m.b_out
    else:
        logits = h_seq[-1] @ m.W_out.T + m.b_out
    return h_seq, logits, caches


def final_state(caches) -> State:
    last = caches[-1]
    return State(last.h, last.c)


def bptt_backward(m: Model, caches, dlogits) -> GradStore:
    """Gradients of the loss whose logit-gradient is ``dlogits`` (full-sequence BPTT)."""
    if not caches:
        raise ContractError("bptt_backward needs at least one cached step")
    if caches[0].arch is not m.cfg.arch:
        raise ContractError("caches were produced by a different architecture")
    T = len(caches)
    B, H = caches[0].h.shape
    h_seq = np.stack([c.h for c in caches])
    dlogits = np.asarray(dlogits, dtype=np.float64)
    grads = {}
    if m.loss_kind == PER_STEP:
        if dlogits.shape != (T, B, m.n_classes):
            raise ContractError(f"dlogits shape {dlogits.shape} != {(T, B, m.n_classes)}")
        grads["W_out"] = dlogits.reshape(T * B, -1).T @ h_seq.reshape(T * B, H)
        grads["b_out"] = dlogits.sum(axis=(0, 1))
        dh_head = dlogits @ m.W_out
    else:
        if dlogits.shape != (B, m.n_classes):
            raise ContractError(f"dlogits shape {dlogits.shape} != {(B, m.n_classes)}")
        grads["W_out"] = dlogits.T @ h_seq[-1]
        grads["b_out"] = dlogits.sum(axis=0)
        dh_head = np.zeros((T, B, H))
        dh_head[-1] = dlogits @ m.W_out

    dpres, dxs = [None] * T, [None] * T
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H)) if m.cfg.arch is Arch.LSTM else None
    for t in range(T - 1, -1, -1):
        dpre, dx, dh_next, dc_next = cells.step_backward_deltas(
            m.cfg, m.cell, caches[t], dh_head[t] + dh_next, dc_next)
        dpres[t], dxs[t] = dpre, dx

    # parameter gradients are linear in the rows, so all timesteps go through one call
    cat = lambda arrs: np.concatenate(arrs, axis=0)  # noqa: E731
    A = cat([c.A for c in caches]) if caches[0].A is not None else None
    cg = cells.param_grads(
        m.cfg, m.cell,
        cat([c.x_raw for c in caches]), cat([c.x for c in caches]),
        cat([c.h_prev for c in caches]), A, cat(dpres), cat(dxs))
    out = GradStore(cg.named(m.cfg.blocks))
    out.update(grads)
    return out


def softmax_xent(logits, target):
    """Cross-entropy with softmax, stabilized by log-sum-exp.

    ``logits`` is ``(..., K)`` and ``target`` the matching integer array (or an
    int for a single vector). Returns per-row ``(loss, dlogits)`` with
    ``dlogits = softmax - onehot``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target)
    K = logits.shape[-1]
    if np.any(target < 0) or np.any(target >= K):
        raise ContractError(f"target out of range for {K} classes")
    shift = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shift).sum(axis=-1, keepdims=True))
    logp = shift - lse
    tgt = target[..., None]
    loss = -np.take_along_axis(logp, tgt, axis=-1)[..., 0]
    d = np.exp(logp)
    np.put_along_axis(d, tgt, np.take_along_axis(d, tgt, axis=-1) - 1.0, axis=-1)
    if loss.ndim == 0:
        return float(loss), d
    return loss, d


def sequence_loss(m: Model, x_seq, targets, state: State | None = None):
    """Mean token loss and its logit gradient. Returns ``(loss, dlogits, caches, logits)``."""
    _, logits, caches = unroll_forward(m, x_seq, state)
    losses, d = softmax_xent(logits, targets)
    n = losses.size
    return float(losses.mean()), d / n, caches, logits


def loss_and_grad(m: Model, x_seq, targets, state: State | None = None):
    loss, dlogits, caches, _ = sequence_loss(m, x_seq, targets, state)
    return loss, bptt_backward(m, caches, dlogits)


def loss_only(m: Model, x_seq, targets, state: State | None = None) -> float:
    _, logits, _ = unroll_forward(m, x_seq, state, keep_caches=False)
    losses, _ = softmax_xent(logits, targets)
    return float(losses.mean())


def predict(m: Model, x_seq) -> np.ndarray:
    """Argmax class per step (per-step head) or per sequence (final head)."""
    _, logits, _ = unroll_forward(m, x_seq, keep_caches=False)
    return logits.argmax(axis=-1)
