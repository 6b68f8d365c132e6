"""Command-line entry point: ``gatelab gen|train|eval|gradcheck|probe``.

Settings come from built-in defaults, then an optional ``--config`` file of
``key=value`` lines, then command-line flags (highest precedence).

Exit codes: 0 success, 2 configuration error, 3 gradient-check failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace

from . import probe, store, tasks, train
from .cells import SAFE_GATES, Arch, CellConfig, ConfigError
from .engine import FINAL, PER_STEP, Model
from .gradcheck import gradient_check
from .numkit import Rng
from .optim import make_optimizer

EXIT_OK, EXIT_CONFIG, EXIT_GRADCHECK, EXIT_IO = 0, 2, 3, 4

MAX_CHECK_HIDDEN, MAX_CHECK_LEN = 8, 16


@dataclass
class RunConfig:
    task: str = "adding"
    arch: str = "lstm"
    refine: str = "none"
    gates: str = ""
    hidden: int = 4
    len: int = 10
    epochs: int = 100
    opt: str = "adam"
    lr: float | None = None
    clip: float = 5.0
    batch: int = 20
    seed: int = 0
    n_train: int = tasks.ADDING_TRAIN
    n_test: int = tasks.ADDING_TEST
    unroll: int = 50
    data: str = "data"
    out: str = "runs"
    checkpoint: str = ""
    unsafe: bool = False
    stop_on_converge: bool = False
    timing: bool = False
    probe_samples: int = 3

    def cell_config(self, input_size: int) -> CellConfig:
        return CellConfig(self.arch, input_size, self.hidden, self.refine, self.gates,
                          unsafe_allow_forget_refine=self.unsafe)

    def validate(self) -> None:
        if self.task not in ("adding", "counting", "charlm"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.hidden < 1 or self.len < 1 or self.epochs < 0 or self.batch < 1:
            raise ConfigError("hidden, len and batch must be positive; epochs non-negative")
        if self.clip is not None and self.clip < 0:
            raise ConfigError("clip must be non-negative (0 disables clipping)")
        try:
            make_optimizer(self.opt, self.lr)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.cell_config(2 if self.task != "charlm" else self.hidden)

    def hash(self) -> str:
        keep = {k: v for k, v in asdict(self).items()
                if k not in ("data", "out", "checkpoint", "timing", "probe_samples")}
        return store.config_hash(keep)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, value):
    kind = _FIELD_TYPES[name]
    if value is None or value == "":
        return None if "None" in str(kind) else value
    if "bool" in str(kind):
        return value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes", "on")
    if "int" in str(kind):
        return int(value)
    if "float" in str(kind):
        return float(value)
    return str(value)


def read_config_file(path: str) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            k = k.replace("-", "_")
            if k not in _FIELD_TYPES:
                raise ConfigError(f"{path}:{lineno}: unknown setting {k!r}")
            out[k] = v
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gatelab", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=["gen", "train", "eval", "gradcheck", "probe"])
    p.add_argument("--config", help="key=value settings file (flags override it)")
    S = argparse.SUPPRESS
    p.add_argument("--task", choices=["adding", "counting", "charlm"], default=S)
    p.add_argument("--arch", choices=[a.value for a in Arch], default=S)
    p.add_argument("--refine", choices=["none", "add", "mul"], default=S)
    p.add_argument("--gates", default=S, help="comma-separated gates to refine, e.g. input,output")
    p.add_argument("--hidden", type=int, default=S)
    p.add_argument("--len", type=int, default=S, help="sequence length L (gradcheck: T)")
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--opt", choices=["sgd", "adam", "adadelta"], default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--clip", type=float, default=S, help="global-norm clip; 0 disables")
    p.add_argument("--batch", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--seeds", default=None, help="comma-separated seeds; each run goes to <out>/seed<k>")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for --seeds")
    p.add_argument("--n-train", dest="n_train", type=int, default=S)
    p.add_argument("--n-test", dest="n_test", type=int, default=S)
    p.add_argument("--unroll", type=int, default=S)
    p.add_argument("--data", default=S, help="dataset directory (adding/counting) or text file (charlm)")
    p.add_argument("--out", default=S)
    p.add_argument("--checkpoint", default=S)
    p.add_argument("--unsafe", action="store_true", default=S,
                   help="allow refining the LSTM forget gate (explosion demo / gradcheck only)")
    p.add_argument("--stop-on-converge", dest="stop_on_converge", action="store_true", default=S)
    p.add_argument("--timing", action="store_true", default=S, help="add wall-time to metrics records")
    p.add_argument("--probe-samples", dest="probe_samples", type=int, default=S)
    p.add_argument("--all", action="store_true", help="gradcheck: run the full supported grid")
    return p


def resolve(args: argparse.Namespace) -> RunConfig:
    values = {}
    if args.config:
        values.update(read_config_file(args.config))
    for name in _FIELD_TYPES:
        if hasattr(args, name):
            values[name] = getattr(args, name)
    cfg = RunConfig(**{k: _coerce(k, v) for k, v in values.items()})
    cfg.validate()
    return cfg


# -- gen ------------------------------------------------------------------------------------

def cmd_gen(cfg: RunConfig) -> int:
    if cfg.task == "charlm":
        raise ConfigError("gen covers adding/counting; charlm reads a plain-text file directly")
    os.makedirs(cfg.data, exist_ok=True)
    streams = train.data_streams(cfg.seed)
    gen = tasks.gen_adding_set if cfg.task == "adding" else tasks.gen_counting_set
    for split, n in (("train", cfg.n_train), ("test", cfg.n_test)):
        samples = gen(n, cfg.len, streams[split])
        store.write_dataset(os.path.join(cfg.data, f"{split}.txt"), samples, cfg.task, cfg.len, cfg.seed)
    print(f"wrote {cfg.n_train} train / {cfg.n_test} test {cfg.task} samples (L={cfg.len}) to {cfg.data}")
    return EXIT_OK


def _load_split(cfg: RunConfig, split: str):
    ds = store.read_dataset(os.path.join(cfg.data, f"{split}.txt"), cfg.task)
    if ds.L != cfg.len:
        raise ConfigError(f"{split} data has L={ds.L} but --len is {cfg.len}")
    return ds.samples


def _encode(cfg: RunConfig, samples):
    if cfg.task == "adding":
        return tasks.encode_adding_batch(samples)
    return tasks.encode_counting_batch(samples, cfg.len)


def _load_corpus(cfg: RunConfig) -> tasks.CharCorpus:
    with open(cfg.data, encoding="utf-8", errors="replace") as fh:
        text = fh.read()
    return tasks.build_char_corpus(text, cfg.unroll)


# -- train ----------------------------------------------------------------------------------

def _metrics(cfg, run_id, epoch, split, loss, acc=None, bpc=None, wall=None):
    return store.MetricsRecord(run_id, epoch, split, loss, acc, bpc,
                               wall if cfg.timing else None, cfg.hash())


def train_run(cfg: RunConfig) -> dict:
    os.makedirs(cfg.out, exist_ok=True)
    metrics_path = os.path.join(cfg.out, "metrics.log")
    if os.path.exists(metrics_path):
        os.remove(metrics_path)
    run_id = f"{cfg.task}-{cfg.arch}-{cfg.refine}-{cfg.gates.replace(',', '+') or 'vanilla'}-s{cfg.seed}"
    streams = train.data_streams(cfg.seed)
    clip = cfg.clip or None

    if cfg.task == "charlm":
        return _train_charlm(cfg, run_id, metrics_path, clip)

    train_data = _encode(cfg, _load_split(cfg, "train"))
    test_data = _encode(cfg, _load_split(cfg, "test"))
    n_classes = 2 if cfg.task == "adding" else cfg.len
    model = Model.create(cfg.cell_config(2), n_classes, streams["init"],
                         PER_STEP if cfg.task == "adding" else FINAL)
    opt = make_optimizer(cfg.opt, cfg.lr)
    shuffle = streams["shuffle"]
    best = {"acc": -1.0}

    def on_epoch(st: train.EpochStats):
        if st.epoch > 0:
            store.append_metrics(_metrics(cfg, run_id, st.epoch, "train", st.train_loss), metrics_path)
        store.append_metrics(_metrics(cfg, run_id, st.epoch, "test", st.test_loss, st.test_acc,
                                      wall=st.wall_time), metrics_path)
        if st.epoch == 0:
            store.save_checkpoint(model, os.path.join(cfg.out, "init.ckpt"), 0, shuffle.get_state(), opt)
        if st.epoch > 0 and st.test_acc > best["acc"]:
            best["acc"] = st.test_acc
            store.save_checkpoint(model, os.path.join(cfg.out, "best.ckpt"), st.epoch, shuffle.get_state(), opt)

    result = train.train(model, opt, train_data, test_data, cfg.epochs, cfg.batch, clip, shuffle,
                         cfg.stop_on_converge, on_epoch)
    last = result.history[-1]
    if last.epoch > 0:
        store.save_checkpoint(model, os.path.join(cfg.out, "final.ckpt"), last.epoch, shuffle.get_state(), opt)
    summary = {"run": run_id, "epochs": last.epoch, "test_loss": last.test_loss, "test_acc": last.test_acc}
    if cfg.task == "adding":
        summary["converged_epoch"] = result.converged_at
    return summary


def _train_charlm(cfg, run_id, metrics_path, clip) -> dict:
    corpus = _load_corpus(cfg)
    settings = train.CharLMSettings(hidden=cfg.hidden, unroll=cfg.unroll, batch_size=cfg.batch,
                                    epochs=cfg.epochs, opt=cfg.opt, lr=cfg.lr, clip=clip)
    cfg.cell_config(corpus.vocab_size)

    def on_epoch(st: train.EpochStats):
        store.append_metrics(_metrics(cfg, run_id, st.epoch, "train", st.train_loss,
                                      bpc=tasks.bits_per_char(st.train_loss)), metrics_path)
        store.append_metrics(_metrics(cfg, run_id, st.epoch, "valid", st.test_loss, bpc=st.test_acc,
                                      wall=st.wall_time), metrics_path)

    model, history = train.run_charlm(corpus, cfg.refine, cfg.gates, cfg.seed, settings, on_epoch,
                                      arch=cfg.arch)
    eval_batch = max(1, min(cfg.batch, (len(corpus.test) - 1) // cfg.unroll))
    test_nats = train.charlm_eval(model, corpus.test, eval_batch, cfg.unroll)
    test_bpc = tasks.bits_per_char(test_nats)
    store.append_metrics(_metrics(cfg, run_id, cfg.epochs, "test", test_nats, bpc=test_bpc), metrics_path)
    store.save_checkpoint(model, os.path.join(cfg.out, "final.ckpt"), cfg.epochs)
    return {"run": run_id, "epochs": cfg.epochs, "test_bpc": test_bpc,
            "uniform_bpc": math.log2(corpus.vocab_size)}


def _train_seed(cfg: RunConfig) -> dict:
    return train_run(cfg)


def cmd_train(cfg: RunConfig, seeds=None, jobs: int = 1) -> int:
    if not seeds:
        summary = train_run(cfg)
        print(" ".join(f"{k}={v}" for k, v in summary.items()))
        return EXIT_OK
    runs = [replace(cfg, seed=s, out=os.path.join(cfg.out, f"seed{s}")) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            summaries = list(pool.map(_train_seed, runs))
    else:
        summaries = [train_run(r) for r in runs]
    for summary in summaries:
        print(" ".join(f"{k}={v}" for k, v in summary.items()))
    return EXIT_OK


# -- eval -----------------------------------------------------------------------------------

def _checkpoint_path(cfg: RunConfig) -> str:
    return cfg.checkpoint or os.path.join(cfg.out, "final.ckpt")


def cmd_eval(cfg: RunConfig) -> int:
    model = store.load_checkpoint(_checkpoint_path(cfg))
    if cfg.task == "charlm":
        corpus = _load_corpus(cfg)
        batch = max(1, min(cfg.batch, (len(corpus.test) - 1) // cfg.unroll))
        nats = train.charlm_eval(model, corpus.test, batch, cfg.unroll)
        print(f"split=test loss={nats:.6f} bpc={tasks.bits_per_char(nats):.6f}")
        return EXIT_OK
    loss, acc = train.evaluate(model, *_encode(cfg, _load_split(cfg, "test")))
    print(f"split=test loss={loss:.6f} acc={acc:.6f}")
    return EXIT_OK


# -- gradcheck ------------------------------------------------------------------------------

def gradcheck_grid(unsafe: bool = False):
    """Every legal (arch, mode, gate subset); with ``unsafe`` also the refined LSTM forget gate."""
    grid = []
    for arch in Arch:
        grid.append((arch.value, "none", ""))
        safe = sorted(SAFE_GATES[arch])
        subsets = [(g,) for g in safe]
        if len(safe) > 1:
            subsets.append(tuple(safe))
        for mode in ("add", "mul"):
            for sub in subsets:
                grid.append((arch.value, mode, ",".join(sub)))
    if unsafe:
        for mode in ("add", "mul"):
            grid.append(("lstm", mode, "forget"))
    return grid


def run_gradcheck(arch, refine, gates, hidden=3, input_size=3, T=8, batch=2, seed=0,
                  tol=1e-5, unsafe=False, project_input=None):
    cfg = CellConfig(arch, input_size, hidden, refine, gates,
                     unsafe_allow_forget_refine=unsafe, project_input=project_input)
    rng = Rng(seed)
    model = Model.create(cfg, 3, rng)
    # nonzero biases so every parameter has a generic gradient
    for name, p in model.params().items():
        if name.startswith("b_"):
            p += 0.1 * rng.normal(p.shape)
    xs = rng.normal((T, batch, input_size))
    ys = rng.integers(0, 3, (T, batch))
    return gradient_check(model, (xs, ys), tol)


def cmd_gradcheck(cfg: RunConfig, run_all: bool) -> int:
    if cfg.hidden > MAX_CHECK_HIDDEN or cfg.len > MAX_CHECK_LEN:
        raise ConfigError(f"gradcheck needs hidden <= {MAX_CHECK_HIDDEN} and len <= {MAX_CHECK_LEN}")
    grid = gradcheck_grid(cfg.unsafe) if run_all else [(cfg.arch, cfg.refine, cfg.gates)]
    failed = 0
    for arch, refine, gates in grid:
        report = run_gradcheck(arch, refine, gates, hidden=cfg.hidden, input_size=3, T=cfg.len,
                               seed=cfg.seed, unsafe=cfg.unsafe)
        failed += not report.passed
        print(f"arch={arch} refine={refine} gates={gates or '-'} {report}")
    print(f"configs={len(grid)} failed={failed}")
    return EXIT_GRADCHECK if failed else EXIT_OK


# -- probe ----------------------------------------------------------------------------------

def cmd_probe(cfg: RunConfig) -> int:
    model = store.load_checkpoint(_checkpoint_path(cfg))
    os.makedirs(cfg.out, exist_ok=True)
    if cfg.task == "charlm":
        raise ConfigError("probe supports the adding and counting tasks")
    samples = _load_split(cfg, "test")
    xs, _ = _encode(cfg, samples)
    label = f"seed={cfg.seed} task={cfg.task}"

    with open(os.path.join(cfg.out, "traces.tsv"), "w") as fh:
        for n in range(min(cfg.probe_samples, len(samples))):
            probe.write_traces(fh, probe.record_gate_traces(model, xs[:, n], task=cfg.task, sample_id=n))

    with open(os.path.join(cfg.out, "stats.txt"), "w") as fh:
        for gate in probe.gate_names(model):
            st = probe.gate_saturation(model, xs, gate)
            fh.write(st.record(seed=cfg.seed, task=cfg.task, gate=gate) + "\n")

    if cfg.task == "adding":
        with open(os.path.join(cfg.out, "carry.txt"), "w") as fh:
            for gate in probe.gate_names(model):
                score = probe.model_carry_alignment(model, samples, gate)
                fh.write(f"{label} gate={gate} carry_alignment={score:.6f}\n")
    else:
        curve = probe.counting_error_curve(model, samples)
        with open(os.path.join(cfg.out, "curve.txt"), "w") as fh:
            for c, err in curve.items():
                fh.write(f"{label} count={c} accumulative_error={err:.6f}\n")

    if model.cfg.arch is Arch.LSTM:
        series = probe.state_grad_norm_series(model, xs[:, 0])
        with open(os.path.join(cfg.out, "gradnorm.txt"), "w") as fh:
            for t, v in enumerate(series, start=1):
                fh.write(f"t={t} state_grad_norm={v:.17g}\n")
    print(f"probe outputs written to {cfg.out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "train":
            return cmd_train(cfg, seeds, args.jobs)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, args.all)
        return cmd_probe(cfg)
    except (ConfigError, store.CheckpointConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, store.StoreError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
