import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gatelab import cells, probe
from gatelab.cells import CellConfig, CellParams
from gatelab.engine import FINAL, Model, predict, unroll_forward
from gatelab.numkit import ContractError, Rng
from gatelab.probe import (GateTrace, carry_alignment, counting_error_curve, describe, gate_names,
                           record_gate_traces, saturation_stats, state_grad_norm_series)
from gatelab.tasks import encode_adding, encode_counting_batch, gen_adding_set, gen_counting_set, make_adding_sample


def model(arch="lstm", mode="none", gates="", n=4, H=4, K=2, seed=0, **kw):
    cfg = CellConfig(arch, n, H, mode, gates, **kw)
    return Model.create(cfg, K, Rng(seed))


def test_gate_names():
    assert gate_names(model()) == ["forget", "input", "output"]
    assert gate_names(model("gru")) == ["update", "reset"]
    assert gate_names(model("mgu")) == ["forget"]


def test_zero_weight_trace_is_half():
    cfg = CellConfig("lstm", 2, 3)
    m = Model(cfg, CellParams.zeros(cfg), np.zeros((2, 3)), np.zeros(2))
    traces = record_gate_traces(m, Rng(0).normal((6, 2)))
    assert len(traces) == 9
    for tr in traces:
        assert np.all(tr.sigma == 0.5) and len(tr.sigma) == 6
    st_ = saturation_stats(traces, 0.01)
    assert st_.sigma.saturated_fraction == 0.0 and st_.sigma.std == 0.0 and st_.sigma.mean == 0.5


@pytest.mark.parametrize("mode", ["add", "mul"])
def test_refined_trace_identity(mode):
    m = model("lstm", mode, "input,output", n=4)
    traces = record_gate_traces(m, Rng(1).normal((7, 4)))
    for tr in traces:
        if tr.gate in ("input", "output"):
            want = tr.sigma + tr.x if mode == "add" else tr.sigma * tr.x
            assert np.array_equal(tr.g, want)
        else:
            assert np.array_equal(tr.g, tr.sigma)
        assert np.all((tr.sigma > 0) & (tr.sigma < 1))


def test_aggregated_traces():
    m = model()
    traces = record_gate_traces(m, Rng(1).normal((5, 4)), aggregate=True)
    assert [t.unit for t in traces] == [-1, -1, -1]
    with pytest.raises(ContractError):
        record_gate_traces(m, Rng(1).normal((5, 2, 4)))


def test_saturation_examples():
    tr = GateTrace("o", 0, np.array([0.999, 0.001]), np.array([0.5, 0.5]), np.zeros(2))
    s = saturation_stats([tr], 0.01)
    assert s.sigma.saturated_fraction == 1.0 and s.refined.saturated_fraction == 0.0
    with pytest.raises(ValueError):
        saturation_stats([tr], 0.5)
    with pytest.raises(ValueError):
        saturation_stats([], 0.01)
    line = s.record(seed=0, gate="o")
    assert line.startswith("seed=0 gate=o sigma_sat=1.000000") and "\n" not in line


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_add_dispersion_when_nonnegative_covariance(seed):
    rng = Rng(seed)
    x = rng.normal(50)
    sigma = 1 / (1 + np.exp(-(x + 0.3 * rng.normal(50))))   # positively related to x
    if np.cov(sigma, x)[0, 1] < 0:
        return
    assert describe(sigma + x).std >= describe(sigma).std


def test_carry_alignment_examples():
    s = make_adding_sample("1101000000", "1001100000")
    T = s.length
    const = GateTrace("o", 0, np.full(T, 0.3), np.full(T, 0.3), np.zeros(T))
    assert carry_alignment(const, s) == 0.0
    carries = s.carries()
    g = np.concatenate([[0.0], np.cumsum(carries[1:])]).astype(float)  # jumps exactly where carries occur
    tr = GateTrace("o", 0, g, g, g)
    assert abs(carry_alignment(tr, s) - 1.0) < 1e-12
    with pytest.raises(ContractError):
        carry_alignment(GateTrace("o", 0, g[:3], g[:3], g[:3]), s)


@given(st.floats(0.1, 10), st.floats(-5, 5))
def test_carry_alignment_affine_invariant(scale, shift):
    s = gen_adding_set(1, 12, Rng(7))[0]
    m = model("lstm", "add", "output", n=2, H=2)
    xs, _ = encode_adding(s)
    tr = [t for t in record_gate_traces(m, xs) if t.gate == "output"][0]
    moved = GateTrace(tr.gate, tr.unit, tr.sigma, scale * tr.g + shift, tr.x)
    assert abs(carry_alignment(tr, s) - carry_alignment(moved, s)) < 1e-9


def test_grad_series_vanilla_bounded_and_monotone():
    m = model()
    series = state_grad_norm_series(m, Rng(2).normal((12, 4)))
    assert series[-1] == 1.0 and len(series) == 12
    assert np.all(series <= 1.0)
    assert np.all(np.diff(series) >= 0)   # non-increasing toward earlier steps
    assert state_grad_norm_series(m, Rng(2).normal((1, 4))).tolist() == [1.0]
    with pytest.raises(ContractError):
        state_grad_norm_series(model("gru"), Rng(2).normal((3, 4)))


def test_grad_series_matches_full_backward_when_state_path_isolated():
    # with U = 0 and output weights zero except through c, d c_T / d c_t is exactly the forget product
    m = model("lstm", "add", "forget", unsafe_allow_forget_refine=True)
    m.cell.U[...] = 0.0
    xs = Rng(3).uniform(0.5, 1.0, (6, 4))
    series = state_grad_norm_series(m, xs)
    _, _, caches = unroll_forward(m, xs)
    dc = np.ones((1, 4))
    vals = [1.0]
    for t in range(5, 0, -1):
        _, _, _, dc = cells.step_backward_deltas(m.cfg, m.cell, caches[t], np.zeros((1, 4)), dc)
        vals.append(float(np.max(np.abs(dc))))
    np.testing.assert_allclose(series, vals[::-1], rtol=1e-14)


def test_grad_series_explodes_with_refined_forget():
    T = 50
    m = model("lstm", "add", "forget", unsafe_allow_forget_refine=True)
    xs = np.full((T, 4), 1.2)
    series = state_grad_norm_series(m, xs)
    assert series[0] >= 1.2 ** (T - 1)


def test_counting_curve_definition():
    L = 8
    samples = gen_counting_set(300, L, Rng(4))
    cfg = CellConfig("lstm", 2, 2)
    m = Model.create(cfg, L, Rng(0), FINAL)
    curve = counting_error_curve(m, samples)
    xs, ys = encode_counting_batch(samples)
    wrong = predict(m, xs) != ys
    counts = np.array([s.count for s in samples])
    assert sorted(curve) == sorted(set(counts.tolist()))
    for c, v in curve.items():
        assert v == pytest.approx(wrong[counts <= c].mean())
    with pytest.raises(ValueError):
        counting_error_curve(m, [])


def test_counting_curve_perfect_model(monkeypatch):
    samples = gen_counting_set(100, 6, Rng(1))
    m = Model.create(CellConfig("lstm", 2, 2), 6, Rng(0), FINAL)
    monkeypatch.setattr(probe, "predict", lambda model, xs: encode_counting_batch(samples)[1])
    assert all(v == 0.0 for v in counting_error_curve(m, samples).values())
    assert probe.mean_error_from({5: 0.2, 10: 0.4, 12: 0.6}, 10) == pytest.approx(0.5)


def test_trace_file_roundtrip():
    m = model("gru", "mul", "reset", n=4)
    traces = record_gate_traces(m, Rng(5).normal((4, 4)))
    buf = io.StringIO()
    probe.write_traces(buf, traces)
    assert buf.getvalue().startswith("#gate=update unit=0\n0\t")
    back = probe.read_traces(io.StringIO(buf.getvalue()))
    assert len(back) == len(traces)
    for a, b in zip(traces, back):
        assert (a.gate, a.unit) == (b.gate, b.unit)
        assert np.array_equal(a.sigma, b.sigma) and np.array_equal(a.g, b.g) and np.array_equal(a.x, b.x)
