"""Acceptance criteria 1-8. Each test prints one PASS/FAIL line (also repeated in the
pytest terminal summary) and then asserts it.

Trained models are cached per session so criteria sharing a workload train once.
Expect roughly 15 minutes on one CPU core.
"""
import functools
import glob
import math
import os
import sysconfig
import time

import numpy as np
import pytest

from gatelab import cli, probe, store, tasks, train
from gatelab.cells import Arch, CellConfig, CellParams, step_forward
from gatelab.engine import Model, unroll_forward
from gatelab.numkit import Rng

from conftest import report

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
EPOCH_BUDGET = 100
COUNTING_EPOCHS = 30


def majority(flags) -> bool:
    return sum(bool(f) for f in flags) >= 2


# -- shared training workloads ---------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def adding_run(arch, refine, gates, L, seed):
    settings = train.TaskSettings(hidden=4, epochs=EPOCH_BUDGET)
    data = _adding_data(L, seed)
    return train.run_adding(arch, refine, gates, L, seed, settings, data, stop_on_converge=True)


@functools.lru_cache(maxsize=None)
def _adding_data(L, seed):
    return train.adding_data(L, seed, tasks.ADDING_TRAIN, tasks.ADDING_TEST)


@functools.lru_cache(maxsize=None)
def counting_run(refine, gates, seed, L=20):
    settings = train.TaskSettings(hidden=2, epochs=COUNTING_EPOCHS)
    data = _counting_data(L, seed)
    return train.run_counting("lstm", refine, gates, L, seed, settings, data), data


@functools.lru_cache(maxsize=None)
def _counting_data(L, seed):
    return train.counting_data(L, seed, tasks.ADDING_TRAIN, tasks.ADDING_TEST)


# -- 1: gradient fidelity ----------------------------------------------------------------------

def test_criterion_1_gradient_fidelity():
    t0 = time.perf_counter()
    grid = cli.gradcheck_grid()
    reports = [(cfg, cli.run_gradcheck(*cfg, hidden=3, input_size=3, T=8, batch=2, tol=1e-5)) for cfg in grid]
    elapsed = time.perf_counter() - t0
    worst = max(reports, key=lambda r: r[1].max_rel_error)
    failed = [cfg for cfg, r in reports if not r.passed]
    ok = len(grid) == 13 and not failed and elapsed < 60
    report("1", ok, f"{len(grid)} configs, failed={failed}, worst={worst[1].max_rel_error:.2e} "
                    f"({'/'.join(worst[0])} {worst[1].param}), {elapsed:.1f}s")
    assert ok


# -- 2: vanilla reduction ----------------------------------------------------------------------

def _trajectory(p, cfg, xs, h0, c0):
    h, c = h0, c0
    out = []
    for x in xs:
        h, c, _ = step_forward(p, cfg, x, h, c)
        out.append((h.copy(), None if c is None else c.copy()))
    return out


def _same(a, b):
    return all(np.array_equal(ha, hb) and (ca is None or np.array_equal(ca, cb)) for (ha, ca), (hb, cb) in zip(a, b))


def test_criterion_2_vanilla_reduction():
    H, steps = 5, 100
    results = {}
    for arch in Arch:
        rng = Rng(1000 + len(results))
        vanilla = CellConfig(arch, H, H)
        p = CellParams.initialize(vanilla, rng)
        p.b += 0.3 * rng.normal(p.b.shape)
        h0 = rng.normal(H)
        c0 = rng.normal(H) if arch is Arch.LSTM else None
        xs = rng.normal((steps, H))
        zeros = np.zeros((steps, H))
        ok = _same(_trajectory(p, vanilla, xs, h0, c0),
                   _trajectory(p, CellConfig(arch, H, H, "none"), xs, h0, c0))
        ref_zero = _trajectory(p, vanilla, zeros, h0, c0)
        for _, mode, gates in [g for g in cli.gradcheck_grid() if g[0] == arch.value and g[1] == "add"]:
            ok &= _same(ref_zero, _trajectory(p, CellConfig(arch, H, H, mode, gates), zeros, h0, c0))
        results[arch.value] = ok
    ok = all(results.values())
    report("2", ok, f"bitwise over {steps} steps: {results}")
    assert ok


# -- 3: adding-task convergence ordering -------------------------------------------------------

def _adding_ordering(L):
    rows = []
    for seed in SEEDS:
        v = adding_run("lstm", "none", "", L, seed).converged_at
        r = adding_run("lstm", "add", "output", L, seed).converged_at
        rows.append((seed, v, r))
    return rows


def _fmt_epochs(rows):
    return ", ".join(f"seed{s}: vanilla={v} RO+={r}" for s, v, r in rows)


def test_criterion_3a_adding_L50():
    rows = _adding_ordering(50)
    ok = majority(r < v for _, v, r in rows)
    report("3(a)", ok, f"L=50 convergence epochs (budget {EPOCH_BUDGET}): {_fmt_epochs(rows)}")
    assert ok


def test_criterion_3b_adding_L100():
    rows = _adding_ordering(100)
    ok = majority(math.isfinite(r) and math.isinf(v) for _, v, r in rows)
    report("3(b)", ok, f"L=100 convergence epochs (budget {EPOCH_BUDGET}): {_fmt_epochs(rows)}")
    assert ok


# -- 4: memory-gradient explosion --------------------------------------------------------------

def test_criterion_4_explosion():
    T, H = 50, 4
    xs = np.full((T, H), 1.2)   # f + x > 1.2 for every entry since f is in (0, 1)
    unsafe = Model.create(CellConfig("lstm", H, H, "add", "forget", unsafe_allow_forget_refine=True), 2, Rng(0))
    vanilla = Model.create(CellConfig("lstm", H, H), 2, Rng(0))
    vanilla.cell.Wx[...], vanilla.cell.U[...], vanilla.cell.b[...] = unsafe.cell.Wx, unsafe.cell.U, unsafe.cell.b
    _, _, caches = unroll_forward(unsafe, xs)
    factors_ok = all(np.all(c.g[:, 0] >= 1.2) for c in caches)
    s_unsafe = probe.state_grad_norm_series(unsafe, xs)
    worst_vanilla = 0.0
    for seed in range(5):
        s_v = probe.state_grad_norm_series(vanilla, Rng(seed).normal((T, H)) * 3)
        worst_vanilla = max(worst_vanilla, float(s_v.max()))
    worst_vanilla = max(worst_vanilla, float(probe.state_grad_norm_series(vanilla, xs).max()))
    bound = 1.2 ** (T - 1)
    ok = factors_ok and s_unsafe[0] >= bound and worst_vanilla <= 1.0
    report("4", ok, f"refined-forget ||dc_T/dc_1||={s_unsafe[0]:.4e} >= 1.2^{T - 1}={bound:.4e}; "
                    f"vanilla max={worst_vanilla:.6f} <= 1")
    assert ok


# -- 5: counting accumulative error ------------------------------------------------------------

def test_criterion_5_counting():
    lines, wins = [], []
    for seed in SEEDS:
        errs = {}
        for label, refine, gates in (("vanilla", "none", ""), ("RI+", "add", "input"), ("RO+", "add", "output")):
            result, (_, test_set) = counting_run(refine, gates, seed)
            errs[label] = probe.mean_error_from(probe.counting_error_curve(result.model, test_set), 10)
        wins.append(errs["RI+"] < errs["vanilla"] and errs["RO+"] < errs["vanilla"])
        lines.append(f"seed{seed}: " + " ".join(f"{k}={v:.4f}" for k, v in errs.items()))
    ok = majority(wins)
    report("5", ok, f"mean accumulative error at count>=10 after {COUNTING_EPOCHS} epochs: " + "; ".join(lines))
    assert ok


# -- 6: gate-output dispersion -----------------------------------------------------------------

def test_criterion_6_dispersion():
    rows = []
    for seed in SEEDS:
        _, test_set = _adding_data(20, seed)
        xs, _ = tasks.encode_adding_batch(test_set)
        refined = adding_run("lstm", "add", "output", 20, seed)
        vanilla = adding_run("lstm", "none", "", 20, seed)
        g_std = probe.gate_saturation(refined.model, xs, "output").refined.std
        s_std = probe.gate_saturation(vanilla.model, xs, "output").sigma.std
        rows.append((seed, g_std, s_std))
    ok = majority(g > s for _, g, s in rows)
    report("6", ok, "output-gate std, refined g vs vanilla sigma: "
                    + ", ".join(f"seed{s}: {g:.4f} vs {v:.4f}" for s, g, v in rows))
    assert ok


def test_carry_alignment_refined_vs_vanilla():
    rows = []
    for seed in SEEDS:
        _, test_set = _adding_data(20, seed)
        probe_set = test_set[:500]
        r = probe.model_carry_alignment(adding_run("lstm", "add", "output", 20, seed).model, probe_set, "output")
        v = probe.model_carry_alignment(adding_run("lstm", "none", "", 20, seed).model, probe_set, "output")
        rows.append((seed, r, v))
    ok = majority(r > v for _, r, v in rows)
    report("probe carry alignment", ok, ", ".join(f"seed{s}: RO+={r:.4f} vanilla={v:.4f}" for s, r, v in rows))
    assert ok


# -- 7: character-level language model ---------------------------------------------------------

MIN_CORPUS_BYTES = 500_000


def stdlib_corpus(n_chars=600_000) -> str:
    """Concatenated standard-library Python sources: a public, always-present plain-text corpus."""
    parts, total = [], 0
    for path in sorted(glob.glob(os.path.join(sysconfig.get_paths()["stdlib"], "*.py"))):
        with open(path, encoding="utf-8", errors="replace") as fh:
            text = fh.read()
        parts.append(text)
        total += len(text)
        if total >= n_chars:
            break
    return "".join(parts)[:n_chars]


def test_criterion_7_char_lm():
    text = stdlib_corpus()
    corpus = tasks.build_char_corpus(text, unroll=50)
    settings = train.CharLMSettings(hidden=128, unroll=50, epochs=10)
    t0 = time.perf_counter()
    results = {}
    for label, refine, gates in (("RO+", "add", "output"), ("vanilla", "none", "")):
        model, history = train.run_charlm(corpus, refine, gates, 0, settings)
        batch = min(settings.batch_size, (len(corpus.test) - 1) // settings.unroll)
        test_bpc = tasks.bits_per_char(train.charlm_eval(model, corpus.test, batch, settings.unroll))
        results[label] = (history[0].train_loss, history[-1].train_loss, test_bpc)
    elapsed = time.perf_counter() - t0
    first, last, bpc = results["RO+"]
    uniform = math.log2(corpus.vocab_size)
    drop = 1.0 - last / first
    ok = len(text.encode()) >= MIN_CORPUS_BYTES and bpc < uniform and drop >= 0.30 and elapsed <= 1800
    report("7", ok, f"corpus {len(text.encode())} bytes V={corpus.vocab_size}; RO+ test BPC={bpc:.4f} "
                    f"< log2V={uniform:.4f}; train loss {first:.4f} -> {last:.4f} ({drop:.1%} drop); "
                    f"vanilla test BPC={results['vanilla'][2]:.4f} (reported); {elapsed:.0f}s")
    assert ok


# -- 8: persistence and determinism ------------------------------------------------------------

def test_criterion_8_persistence(tmp_path):
    data = tmp_path / "data"
    assert cli.main(["gen", "--task", "adding", "--len", "12", "--seed", "3", "--n-train", "1000",
                     "--n-test", "300", "--data", str(data)]) == 0
    args = ["train", "--task", "adding", "--len", "12", "--epochs", "3", "--refine", "add", "--gates",
            "input,output", "--seed", "3", "--data", str(data)]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    metrics_same = (tmp_path / "a/metrics.log").read_bytes() == (tmp_path / "b/metrics.log").read_bytes()

    model = store.load_checkpoint(tmp_path / "a/final.ckpt")
    store.save_checkpoint(model, tmp_path / "again.ckpt")
    again = store.load_checkpoint(tmp_path / "again.ckpt")
    rng = Rng(11)
    roundtrip = all(np.array_equal(unroll_forward(model, x)[1], unroll_forward(again, x)[1])
                    for x in (rng.normal((12, 4, 2)) for _ in range(10)))
    roundtrip &= all(np.array_equal(v, again.params()[k]) for k, v in model.params().items())

    bad = tmp_path / "bad.txt"
    bad.write_text("#task=adding L=4 seed=0 version=1\n1000\t1000\t0100\n1100\t0100\t1100\n")
    try:
        store.read_dataset(bad, "adding")
        rejected = False
    except store.DatasetError as exc:
        rejected = "line 3" in str(exc)
    ok = metrics_same and roundtrip and rejected
    report("8", ok, f"metrics byte-identical={metrics_same}, checkpoint bitwise round-trip={roundtrip}, "
                    f"inconsistent adding line rejected={rejected}")
    assert ok
