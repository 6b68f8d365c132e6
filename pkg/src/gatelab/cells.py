"""Vanilla and refined LSTM / GRU / MGU cells with analytic backward steps.

A refined gate short-connects the cell input to the sigmoid output::

    g = sigmoid(W x + U h + b) <op> x,     <op> in {+, *}

so the cell input ``x`` must have the hidden width. When ``input_size`` differs
from ``hidden_size`` an affine projection ``x = W_in x_raw + b_in`` runs first
and every equation below sees the projected vector.

All step functions take row batches: ``x_raw`` is ``(B, input_size)`` and the
states are ``(B, hidden_size)``. 1-D arguments are accepted and treated as a
batch of one; outputs then come back 1-D as well.

Weights for the blocks of one architecture are packed into stacked arrays
(``Wx`` is ``(G, H, n)``, ``U`` is ``(G, H, H)``, ``b`` is ``(G, H)``) so one
matmul serves every gate. :meth:`CellParams.named` exposes per-gate views
``W_f``, ``U_f``, ``b_f`` and so on.

Block order::

    lstm: f, i, o, c      (sigmoid gates f, i, o; candidate c)
    gru:  z, r, h         (update z, reset r; candidate h)
    mgu:  f, h            (forget f; candidate h)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .numkit import DTYPE, ContractError, Rng, init_xavier, sigmoid


class ConfigError(ValueError):
    """Illegal cell configuration."""


class Arch(str, Enum):
    LSTM = "lstm"
    GRU = "gru"
    MGU = "mgu"


class RefineMode(str, Enum):
    NONE = "none"
    ADD = "add"
    MUL = "mul"


BLOCKS = {
    Arch.LSTM: ("f", "i", "o", "c"),
    Arch.GRU: ("z", "r", "h"),
    Arch.MGU: ("f", "h"),
}
# number of leading sigmoid blocks per architecture
N_SIGMOID = {Arch.LSTM: 3, Arch.GRU: 2, Arch.MGU: 1}

GATE_BLOCK = {
    Arch.LSTM: {"forget": "f", "input": "i", "output": "o"},
    Arch.GRU: {"update": "z", "reset": "r"},
    Arch.MGU: {"forget": "f"},
}
SAFE_GATES = {
    Arch.LSTM: frozenset({"input", "output"}),
    Arch.GRU: frozenset({"reset"}),
    Arch.MGU: frozenset({"forget"}),
}

_REJECT_REASON = {
    (Arch.LSTM, "forget"): (
        "refining the LSTM forget gate makes the memory-state gradient a product of "
        "unbounded factors (f+x or f*x) and explodes; only the explosion demo may "
        "enable it via unsafe_allow_forget_refine"
    ),
    (Arch.GRU, "update"): (
        "refining the GRU update gate puts an unbounded factor into the hidden-state "
        "interpolation h = z*h_prev + (1-z)*h_cand, whose gradient then explodes"
    ),
    (Arch.MGU, "update"): (
        "MGU's forget gate may be refined only where it resets h_prev; the state "
        "interpolation h = (1-f)*h_prev + f*h_cand always uses the plain sigmoid gate"
    ),
    (Arch.MGU, "interpolation"): (
        "MGU's forget gate may be refined only where it resets h_prev; the state "
        "interpolation h = (1-f)*h_prev + f*h_cand always uses the plain sigmoid gate"
    ),
}


def _parse_gates(gates) -> frozenset:
    if gates is None:
        return frozenset()
    if isinstance(gates, str):
        gates = [g for g in gates.replace("+", ",").split(",") if g.strip()]
    return frozenset(g.strip().lower() for g in gates)


@dataclass(frozen=True)
class CellConfig:
    arch: Arch
    input_size: int
    hidden_size: int
    refine_mode: RefineMode = RefineMode.NONE
    refined_gates: frozenset = field(default_factory=frozenset)
    unsafe_allow_forget_refine: bool = False
    # None: project iff input_size != hidden_size
    project_input: bool | None = None
    forget_bias: float = 0.0

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "arch", Arch(self.arch))
        set_(self, "refine_mode", RefineMode(self.refine_mode))
        set_(self, "refined_gates", _parse_gates(self.refined_gates))
        if self.project_input is None:
            set_(self, "project_input", self.input_size != self.hidden_size)
        self.validate()

    def validate(self) -> None:
        if self.input_size < 1 or self.hidden_size < 1:
            raise ConfigError("input_size and hidden_size must be positive")
        refining = self.refine_mode is not RefineMode.NONE
        if refining and not self.refined_gates:
            raise ConfigError(f"refine_mode={self.refine_mode.value} needs at least one refined gate")
        if not refining and self.refined_gates:
            raise ConfigError("refined_gates given but refine_mode is none")
        known = GATE_BLOCK[self.arch]
        for gate in sorted(self.refined_gates):
            if (self.arch, gate) in _REJECT_REASON:
                if self.arch is Arch.LSTM and gate == "forget" and self.unsafe_allow_forget_refine:
                    continue
                raise ConfigError(f"cannot refine {self.arch.value} {gate} gate: "
                                  + _REJECT_REASON[(self.arch, gate)])
            if gate not in known:
                raise ConfigError(f"unknown gate {gate!r} for {self.arch.value}; "
                                  f"refinable gates are {sorted(SAFE_GATES[self.arch])}")
        if refining and not self.project_input and self.input_size != self.hidden_size:
            raise ConfigError("refined gates add the cell input elementwise; with "
                              "input_size != hidden_size an input projection is required")

    @property
    def cell_input_size(self) -> int:
        return self.hidden_size if self.project_input else self.input_size

    @property
    def blocks(self) -> tuple:
        return BLOCKS[self.arch]

    def block_mode(self, block: str) -> RefineMode:
        for gate, blk in GATE_BLOCK[self.arch].items():
            if blk == block and gate in self.refined_gates:
                return self.refine_mode
        return RefineMode.NONE

    def to_dict(self) -> dict:
        return {
            "arch": self.arch.value,
            "input_size": self.input_size,
            "hidden_size": self.hidden_size,
            "refine_mode": self.refine_mode.value,
            "refined_gates": ",".join(sorted(self.refined_gates)),
            "unsafe_allow_forget_refine": self.unsafe_allow_forget_refine,
            "project_input": self.project_input,
            "forget_bias": self.forget_bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CellConfig":
        return cls(
            arch=d["arch"],
            input_size=int(d["input_size"]),
            hidden_size=int(d["hidden_size"]),
            refine_mode=d.get("refine_mode", "none"),
            refined_gates=d.get("refined_gates", ""),
            unsafe_allow_forget_refine=_as_bool(d.get("unsafe_allow_forget_refine", False)),
            project_input=_as_bool(d["project_input"]) if "project_input" in d else None,
            forget_bias=float(d.get("forget_bias", 0.0)),
        )


def _as_bool(v) -> bool:
    if isinstance(v, str):
        return v.strip().lower() in ("1", "true", "yes", "on")
    return bool(v)


class CellParams:
    """Packed weights of one cell (also used as the matching gradient record)."""

    def __init__(self, Wx, U, b, W_in=None, b_in=None):
        self.Wx = Wx
        self.U = U
        self.b = b
        self.W_in = W_in
        self.b_in = b_in

    @classmethod
    def initialize(cls, cfg: CellConfig, rng: Rng) -> "CellParams":
        H, n = cfg.hidden_size, cfg.cell_input_size
        G = len(cfg.blocks)
        Wx = np.stack([init_xavier(H, n, rng) for _ in range(G)])
        U = np.stack([init_xavier(H, H, rng) for _ in range(G)])
        b = np.zeros((G, H), dtype=DTYPE)
        if cfg.arch is Arch.LSTM and cfg.forget_bias:
            b[0] = cfg.forget_bias
        W_in = b_in = None
        if cfg.project_input:
            W_in = init_xavier(H, cfg.input_size, rng)
            b_in = np.zeros(H, dtype=DTYPE)
        return cls(Wx, U, b, W_in, b_in)

    @classmethod
    def zeros(cls, cfg: CellConfig) -> "CellParams":
        H, n = cfg.hidden_size, cfg.cell_input_size
        G = len(cfg.blocks)
        W_in = np.zeros((H, cfg.input_size)) if cfg.project_input else None
        b_in = np.zeros(H) if cfg.project_input else None
        return cls(np.zeros((G, H, n)), np.zeros((G, H, H)), np.zeros((G, H)), W_in, b_in)

    def named(self, blocks) -> dict:
        """Per-gate views keyed ``W_<blk>``, ``U_<blk>``, ``b_<blk>`` plus ``W_in``/``b_in``."""
        out = {}
        for k, blk in enumerate(blocks):
            out[f"W_{blk}"] = self.Wx[k]
            out[f"U_{blk}"] = self.U[k]
            out[f"b_{blk}"] = self.b[k]
        if self.W_in is not None:
            out["W_in"] = self.W_in
            out["b_in"] = self.b_in
        return out

    def copy(self) -> "CellParams":
        cp = lambda a: None if a is None else a.copy()  # noqa: E731
        return CellParams(self.Wx.copy(), self.U.copy(), self.b.copy(), cp(self.W_in), cp(self.b_in))


@dataclass
class StepCache:
    arch: Arch
    x_raw: np.ndarray
    x: np.ndarray          # cell input after projection
    h_prev: np.ndarray
    c_prev: np.ndarray | None
    pre: np.ndarray        # (B, G, H) pre-activations of every block
    s: np.ndarray          # (B, n_sigmoid, H) plain sigmoid outputs
    g: np.ndarray          # (B, n_sigmoid, H) gate outputs after refinement
    cand: np.ndarray       # candidate c~ (lstm) or h~ (gru/mgu)
    A: np.ndarray | None   # reset product (gru/mgu)
    h: np.ndarray
    c: np.ndarray | None
    tc: np.ndarray | None  # tanh(c) (lstm)
    squeeze: bool = False


def refine(a: np.ndarray, x: np.ndarray, mode: RefineMode) -> np.ndarray:
    if a.shape != x.shape:
        raise ContractError(f"refine length mismatch: {a.shape} vs {x.shape}")
    mode = RefineMode(mode)
    if mode is RefineMode.ADD:
        return a + x
    if mode is RefineMode.MUL:
        return a * x
    return a


def refine_backward(dg, a, x, mode):
    """Return ``(d_sigmoid_output, d_input_direct)`` for ``g = a <op> x``."""
    if not (dg.shape == a.shape == x.shape):
        raise ContractError(f"refine_backward length mismatch: {dg.shape}, {a.shape}, {x.shape}")
    mode = RefineMode(mode)
    if mode is RefineMode.ADD:
        return dg, dg
    if mode is RefineMode.MUL:
        return dg * x, dg * a
    return dg, np.zeros_like(dg)


def _rows(v):
    v = np.asarray(v, dtype=DTYPE)
    return v[None, :] if v.ndim == 1 else v


def _check_inputs(cfg: CellConfig, p: CellParams, x_raw, h_prev):
    if x_raw.shape[-1] != cfg.input_size:
        raise ContractError(f"x_raw width {x_raw.shape[-1]} != input_size {cfg.input_size}")
    if h_prev.shape[-1] != cfg.hidden_size:
        raise ContractError(f"h_prev width {h_prev.shape[-1]} != hidden_size {cfg.hidden_size}")
    if p.Wx.shape[0] != len(cfg.blocks):
        raise ContractError("parameters do not match the configured architecture")


def _project(cfg, p, x_raw):
    if cfg.project_input:
        return x_raw @ p.W_in.T + p.b_in
    return x_raw


def _gate_outputs(cfg, s, x):
    """Apply refinement to each selected sigmoid block; unselected blocks pass through."""
    g = s
    for k, blk in enumerate(cfg.blocks[:N_SIGMOID[cfg.arch]]):
        mode = cfg.block_mode(blk)
        if mode is not RefineMode.NONE:
            if g is s:
                g = s.copy()
            g[:, k] = refine(s[:, k], x, mode)
    return g


def step_forward(p: CellParams, cfg: CellConfig, x_raw, h_prev, c_prev=None):
    """One step of the configured architecture. Returns ``(h, c, cache)``; ``c`` is None for gru/mgu."""
    squeeze = np.ndim(x_raw) == 1
    x_raw, h_prev = _rows(x_raw), _rows(h_prev)
    _check_inputs(cfg, p, x_raw, h_prev)
    B, H = h_prev.shape
    G = len(cfg.blocks)
    ns = N_SIGMOID[cfg.arch]
    x = _project(cfg, p, x_raw)
    n = x.shape[1]

    if cfg.arch is Arch.LSTM:
        if c_prev is None:
            raise ContractError("lstm step needs c_prev")
        c_prev = _rows(c_prev)
        if c_prev.shape != h_prev.shape:
            raise ContractError(f"c_prev shape {c_prev.shape} != h_prev shape {h_prev.shape}")
        pre = (x @ p.Wx.reshape(G * H, n).T + h_prev @ p.U.reshape(G * H, H).T
               + p.b.reshape(G * H)).reshape(B, G, H)
        s = sigmoid(pre[:, :ns])
        g = _gate_outputs(cfg, s, x)
        cand = np.tanh(pre[:, 3])
        c = g[:, 0] * c_prev + g[:, 1] * cand
        tc = np.tanh(c)
        h = g[:, 2] * tc
        A = None
    else:
        gate_pre = (x @ p.Wx[:ns].reshape(ns * H, n).T + h_prev @ p.U[:ns].reshape(ns * H, H).T
                    + p.b[:ns].reshape(ns * H)).reshape(B, ns, H)
        s = sigmoid(gate_pre)
        g = _gate_outputs(cfg, s, x)
        # gru: reset gate is block 1 and update gate block 0; mgu: single forget gate
        reset = g[:, 1] if cfg.arch is Arch.GRU else g[:, 0]
        A = reset * h_prev
        cand_pre = x @ p.Wx[ns].T + A @ p.U[ns].T + p.b[ns]
        pre = np.concatenate([gate_pre, cand_pre[:, None, :]], axis=1)
        cand = np.tanh(cand_pre)
        # state interpolation always uses the plain sigmoid gate
        mix = s[:, 0]
        if cfg.arch is Arch.GRU:
            h = mix * h_prev + (1.0 - mix) * cand
        else:
            h = (1.0 - mix) * h_prev + mix * cand
        c = tc = None

    cache = StepCache(cfg.arch, x_raw, x, h_prev, c_prev, pre, s, g, cand, A, h, c, tc, squeeze)
    if squeeze:
        return h[0], (None if c is None else c[0]), cache
    return h, c, cache


def lstm_step_forward(p, cfg, x_raw, h_prev, c_prev):
    if cfg.arch is not Arch.LSTM:
        raise ContractError("lstm_step_forward called with a non-lstm config")
    return step_forward(p, cfg, x_raw, h_prev, c_prev)


def gru_step_forward(p, cfg, x_raw, h_prev):
    if cfg.arch is not Arch.GRU:
        raise ContractError("gru_step_forward called with a non-gru config")
    h, _, cache = step_forward(p, cfg, x_raw, h_prev)
    return h, cache


def mgu_step_forward(p, cfg, x_raw, h_prev):
    if cfg.arch is not Arch.MGU:
        raise ContractError("mgu_step_forward called with a non-mgu config")
    h, _, cache = step_forward(p, cfg, x_raw, h_prev)
    return h, cache


def _refined_grads(cfg, cache, dg):
    """Split gate-output gradients into sigmoid-output gradients plus the direct input term."""
    ds = dg
    dx_direct = None
    for k, blk in enumerate(cfg.blocks[:N_SIGMOID[cfg.arch]]):
        mode = cfg.block_mode(blk)
        if mode is RefineMode.NONE:
            continue
        if ds is dg:
            ds = dg.copy()
        ds[:, k], dxd = refine_backward(dg[:, k], cache.s[:, k], cache.x, mode)
        dx_direct = dxd if dx_direct is None else dx_direct + dxd
    return ds, dx_direct


def step_backward_deltas(cfg: CellConfig, p: CellParams, cache: StepCache, dh, dc=None):
    """Reverse one step down to the block pre-activations.

    Returns ``(dpre, dx, dh_prev, dc_prev)`` where ``dx`` is the gradient with
    respect to the (projected) cell input. Parameter gradients follow from
    ``dpre`` via :func:`param_grads`.
    """
    if cache.arch is not cfg.arch:
        raise ContractError(f"cache from {cache.arch.value} used with {cfg.arch.value} config")
    dh = _rows(dh)
    if dh.shape != cache.h.shape:
        raise ContractError(f"dh shape {dh.shape} != state shape {cache.h.shape}")
    G = len(cfg.blocks)
    ns = N_SIGMOID[cfg.arch]
    B, H = dh.shape
    s, g = cache.s, cache.g
    dg = np.empty_like(s)

    if cfg.arch is Arch.LSTM:
        f, i, o = g[:, 0], g[:, 1], g[:, 2]
        dct = dh * o * (1.0 - cache.tc ** 2)
        if dc is not None:
            dct = dct + _rows(dc)
        dg[:, 0] = dct * cache.c_prev
        dg[:, 1] = dct * cache.cand
        dg[:, 2] = dh * cache.tc
        dcand = dct * i
        dc_prev = dct * f
        ds, dx_direct = _refined_grads(cfg, cache, dg)
        dpre = np.empty((B, G, H))
        dpre[:, :ns] = ds * s * (1.0 - s)
        dpre[:, 3] = dcand * (1.0 - cache.cand ** 2)
        dh_prev = dpre.reshape(B, G * H) @ p.U.reshape(G * H, H)
    else:
        mix = s[:, 0]
        if cfg.arch is Arch.GRU:
            dmix = dh * (cache.h_prev - cache.cand)
            dcand = dh * (1.0 - mix)
            dh_prev = dh * mix
        else:
            dmix = dh * (cache.cand - cache.h_prev)
            dcand = dh * mix
            dh_prev = dh * (1.0 - mix)
        dcand_pre = dcand * (1.0 - cache.cand ** 2)
        dA = dcand_pre @ p.U[ns]
        reset_k = 1 if cfg.arch is Arch.GRU else 0
        dg[:, reset_k] = dA * cache.h_prev
        dh_prev = dh_prev + dA * g[:, reset_k]
        if cfg.arch is Arch.GRU:
            dg[:, 0] = dmix
        ds, dx_direct = _refined_grads(cfg, cache, dg)
        if cfg.arch is Arch.MGU:
            # forget gate feeds both the reset product and the interpolation
            ds[:, 0] += dmix
        dpre = np.empty((B, G, H))
        dpre[:, :ns] = ds * s * (1.0 - s)
        dpre[:, ns] = dcand_pre
        dh_prev = dh_prev + dpre[:, :ns].reshape(B, ns * H) @ p.U[:ns].reshape(ns * H, H)
        dc_prev = None

    n = cache.x.shape[1]
    dx = dpre.reshape(B, G * H) @ p.Wx.reshape(G * H, n)
    if dx_direct is not None:
        dx = dx + dx_direct
    return dpre, dx, dh_prev, dc_prev


def param_grads(cfg: CellConfig, p: CellParams, x_raw, x, h_prev, A, dpre, dx) -> CellParams:
    """Parameter gradients summed over all rows (rows may be batch members or timesteps)."""
    G = len(cfg.blocks)
    ns = N_SIGMOID[cfg.arch]
    R, _, H = dpre.shape
    flat = dpre.reshape(R, G * H)
    dWx = (flat.T @ x).reshape(p.Wx.shape)
    if cfg.arch is Arch.LSTM:
        dU = (flat.T @ h_prev).reshape(p.U.shape)
    else:
        dU = np.empty_like(p.U)
        dU[:ns] = (dpre[:, :ns].reshape(R, ns * H).T @ h_prev).reshape(ns, H, H)
        dU[ns] = dpre[:, ns].T @ A
    db = dpre.sum(axis=0)
    dW_in = db_in = None
    if cfg.project_input:
        dW_in = dx.T @ x_raw
        db_in = dx.sum(axis=0)
    return CellParams(dWx, dU, db, dW_in, db_in)


def input_grad(cfg: CellConfig, p: CellParams, dx):
    """Map the cell-input gradient back through the projection."""
    return dx @ p.W_in if cfg.project_input else dx


def cell_step_backward(cfg: CellConfig, p: CellParams, cache: StepCache, dh, dc=None):
    """Exact reverse of one step.

    Returns ``(dx_raw, dh_prev, dc_prev, dparams)``; ``dc_prev`` is None for
    gru/mgu and ``dparams`` is a :class:`CellParams` of gradients.
    """
    dpre, dx, dh_prev, dc_prev = step_backward_deltas(cfg, p, cache, dh, dc)
    grads = param_grads(cfg, p, cache.x_raw, cache.x, cache.h_prev, cache.A, dpre, dx)
    dx_raw = input_grad(cfg, p, dx)
    if cache.squeeze:
        dx_raw, dh_prev = dx_raw[0], dh_prev[0]
        dc_prev = None if dc_prev is None else dc_prev[0]
    return dx_raw, dh_prev, dc_prev, grads
