"""Gate instrumentation: activation traces, saturation statistics, carry-bit
alignment, memory-state gradient series and accumulative counting error."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cells import GATE_BLOCK, N_SIGMOID, Arch
from .engine import Model, predict, unroll_forward
from .numkit import ContractError
from .tasks import encode_adding_batch, encode_counting_batch

DEFAULT_EPS = 0.01


def gate_names(m: Model) -> list[str]:
    """Gate name for each sigmoid block, in block order."""
    by_block = {blk: name for name, blk in GATE_BLOCK[m.cfg.arch].items()}
    return [by_block[b] for b in m.cfg.blocks[:N_SIGMOID[m.cfg.arch]]]


def gate_activations(m: Model, x_seq) -> dict:
    """``{gate: (sigma, g, x)}`` arrays of shape ``(T, B, H)`` for a batch of sequences."""
    _, _, caches = unroll_forward(m, x_seq)
    out = {}
    x = np.stack([c.x for c in caches])
    for k, name in enumerate(gate_names(m)):
        s = np.stack([c.s[:, k] for c in caches])
        g = np.stack([c.g[:, k] for c in caches])
        out[name] = (s, g, x)
    return out


@dataclass
class GateTrace:
    gate: str
    unit: int            # -1 when averaged over units
    sigma: np.ndarray    # plain sigmoid output per step
    g: np.ndarray        # gate output after refinement
    x: np.ndarray        # cell input component per step
    task: str = ""
    sample_id: int = 0


def record_gate_traces(m: Model, x_seq, aggregate: bool = False, task: str = "",
                       sample_id: int = 0) -> list[GateTrace]:
    """Traces for one sequence ``(T, input_size)``: one per gate and unit, or per gate if aggregated."""
    xs = np.asarray(x_seq, dtype=np.float64)
    if xs.ndim != 2:
        raise ContractError("record_gate_traces takes a single (T, input_size) sequence")
    traces = []
    for name, (s, g, x) in gate_activations(m, xs).items():
        s, g, x = s[:, 0], g[:, 0], x[:, 0]
        if aggregate:
            traces.append(GateTrace(name, -1, s.mean(1), g.mean(1), x.mean(1), task, sample_id))
        else:
            for u in range(s.shape[1]):
                traces.append(GateTrace(name, u, s[:, u].copy(), g[:, u].copy(), x[:, u].copy(),
                                        task, sample_id))
    return traces


@dataclass
class GateStats:
    saturated_fraction: float
    mean: float
    std: float
    min: float
    max: float
    n: int


@dataclass
class SaturationStats:
    sigma: GateStats
    refined: GateStats

    def record(self, **labels) -> str:
        """Single-line ``key=value`` record."""
        fields = dict(labels)
        for prefix, st in (("sigma", self.sigma), ("g", self.refined)):
            fields.update({
                f"{prefix}_sat": f"{st.saturated_fraction:.6f}", f"{prefix}_mean": f"{st.mean:.6f}",
                f"{prefix}_std": f"{st.std:.6f}", f"{prefix}_min": f"{st.min:.6f}",
                f"{prefix}_max": f"{st.max:.6f}", f"{prefix}_n": str(st.n),
            })
        return " ".join(f"{k}={v}" for k, v in fields.items())


def describe(values, eps: float = DEFAULT_EPS) -> GateStats:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("no values to describe")
    sat = np.mean((np.abs(v) <= eps) | (np.abs(v - 1.0) <= eps))
    return GateStats(float(sat), float(v.mean()), float(v.std()), float(v.min()), float(v.max()), v.size)


def saturation_stats(traces, eps: float = DEFAULT_EPS) -> SaturationStats:
    """Statistics pooled over every step and unit of ``traces``."""
    if not 0 < eps < 0.5:
        raise ValueError("eps must lie in (0, 0.5)")
    traces = list(traces)
    if not traces:
        raise ValueError("empty traces")
    sig = np.concatenate([t.sigma for t in traces])
    g = np.concatenate([t.g for t in traces])
    return SaturationStats(describe(sig, eps), describe(g, eps))


def gate_saturation(m: Model, x_seq, gate: str, eps: float = DEFAULT_EPS) -> SaturationStats:
    """Batched equivalent of ``saturation_stats(record_gate_traces(...))`` over many sequences."""
    s, g, _ = gate_activations(m, x_seq)[gate]
    return SaturationStats(describe(s, eps), describe(g, eps))


def _correlation(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt(np.sum(a * a) * np.sum(b * b))
    return float(np.clip(np.sum(a * b) / denom, -1.0, 1.0)) if denom > 0 else 0.0


def carry_alignment(trace: GateTrace, sample) -> float:
    """Point-biserial correlation of step-to-step gate jumps ``|g_t - g_{t-1}|``
    with "carry generated at step t", over t = 1..T-1. Zero if either side is constant."""
    g = np.asarray(trace.g, dtype=np.float64)
    carries = sample.carries()
    if g.size != carries.size:
        raise ContractError(f"trace length {g.size} != sample length {carries.size}")
    jumps = np.abs(np.diff(g))
    return _correlation(jumps, carries[1:])


def model_carry_alignment(m: Model, samples, gate: str) -> float:
    """Best unit's mean carry alignment for ``gate`` over adding ``samples``."""
    xs, _ = encode_adding_batch(samples)
    _, g, _ = gate_activations(m, xs)[gate]
    H = g.shape[2]
    scores = np.zeros(H)
    for n, sample in enumerate(samples):
        for u in range(H):
            scores[u] += carry_alignment(GateTrace(gate, u, g[:, n, u], g[:, n, u], g[:, n, u]), sample)
    return float(np.max(scores / len(samples)))


def state_grad_norm_series(m: Model, x_seq) -> np.ndarray:
    """``||d c_T / d c_t||_inf`` along the memory path for t = 1..T (index 0 is t = 1).

    The memory path contributes the diagonal factor chain ``prod_{k>t} diag(f_k)``,
    where ``f_k`` is the forget-gate output actually used in ``c_k = f_k * c_{k-1} + ...``
    (the refined output when forget refinement is enabled).
    """
    if m.cfg.arch is not Arch.LSTM:
        raise ContractError("state_grad_norm_series needs an lstm model")
    xs = np.asarray(x_seq, dtype=np.float64)
    if xs.ndim != 2:
        raise ContractError("state_grad_norm_series takes a single (T, input_size) sequence")
    _, _, caches = unroll_forward(m, xs)
    T = len(caches)
    series = np.empty(T)
    prod = np.ones(m.cfg.hidden_size)
    series[T - 1] = 1.0
    for t in range(T - 2, -1, -1):
        prod = prod * caches[t + 1].g[0, 0]
        series[t] = np.max(np.abs(prod))
    return series


def counting_error_curve(m: Model, samples) -> dict[int, float]:
    """For each count ``c`` present, the error rate among samples with label <= c."""
    samples = list(samples)
    if not samples:
        raise ValueError("empty test set")
    xs, ys = encode_counting_batch(samples)
    pred = predict(m, xs)
    counts = ys + 1
    wrong = pred != ys
    curve = {}
    for c in sorted(set(counts.tolist())):
        mask = counts <= c
        curve[c] = float(wrong[mask].mean())
    return curve


def mean_error_from(curve: dict[int, float], min_count: int = 10) -> float:
    vals = [v for c, v in curve.items() if c >= min_count]
    return float(np.mean(vals)) if vals else float("nan")


def write_traces(fh, traces) -> None:
    """Tab-separated ``t sigma g x`` blocks, each under a ``#gate=<name> unit=<i>`` header."""
    for tr in traces:
        fh.write(f"#gate={tr.gate} unit={tr.unit}\n")
        for t, (s, g, x) in enumerate(zip(tr.sigma, tr.g, tr.x)):
            fh.write(f"{t}\t{s:.17g}\t{g:.17g}\t{x:.17g}\n")


def read_traces(fh) -> list[GateTrace]:
    traces, rows, head = [], [], None

    def flush():
        if head is not None:
            arr = np.array(rows, dtype=np.float64).reshape(-1, 4)
            traces.append(GateTrace(head[0], head[1], arr[:, 1], arr[:, 2], arr[:, 3]))

    for line in fh:
        line = line.rstrip("\n")
        if line.startswith("#gate="):
            flush()
            kv = dict(part.split("=", 1) for part in line[1:].split())
            head, rows = (kv["gate"], int(kv["unit"])), []
        elif line:
            rows.append([float(v) for v in line.split("\t")])
    flush()
    return traces
