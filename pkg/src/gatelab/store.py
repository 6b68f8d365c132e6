"""Text checkpoints, append-only metrics logs and dataset files.

Every float is written with 17 significant digits (``%.17g``), which
round-trips any IEEE double exactly.

Checkpoint layout::

    #refined-gates-ckpt v1
    @config arch=lstm input_size=2 hidden_size=4 refine_mode=add refined_gates=output ...
    @head classes=2 loss=per_step
    @progress epoch=12
    @rng {"bit_generator": "PCG64", ...}          (optional)
    @optim kind=adam t=600 lr=0.001 ...           (optional)
    @param W_f 4 4
    <row of 4 values>
    ...
    @param opt.m.W_f 4 4                           (optimizer slots, optional)
    ...
    @end
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .cells import CellConfig, CellParams
from .engine import Model
from .optim import Optimizer, make_optimizer
from .tasks import AddingSample, CountingSample, trailing_run

CKPT_MAGIC = "#refined-gates-ckpt"
CKPT_VERSION = "v1"
DATASET_VERSION = "1"


class StoreError(Exception):
    pass


class CheckpointParseError(StoreError):
    pass


class CheckpointVersionError(StoreError):
    pass


class CheckpointShapeError(StoreError):
    pass


class CheckpointConfigError(CheckpointShapeError):
    pass


class DatasetError(StoreError):
    pass


def fmt(v: float) -> str:
    return f"{v:.17g}"


def _kv(pairs: dict) -> str:
    return " ".join(f"{k}={v}" for k, v in pairs.items())


def _parse_kv(text: str, lineno: int) -> dict:
    out = {}
    for part in text.split():
        if "=" not in part:
            raise CheckpointParseError(f"line {lineno}: expected key=value, got {part!r}")
        k, v = part.split("=", 1)
        out[k] = v
    return out


@dataclass
class Checkpoint:
    model: Model
    epoch: int = 0
    rng_state: dict | None = None
    optimizer: Optimizer | None = None
    extra: dict = field(default_factory=dict)


def _write_block(lines, name, arr):
    a = np.asarray(arr, dtype=np.float64)
    a2 = a.reshape(1, -1) if a.ndim == 1 else a
    lines.append(f"@param {name} {a2.shape[0]} {a2.shape[1]}")
    for row in a2:
        lines.append(" ".join(fmt(v) for v in row))


def save_checkpoint(m: Model, path, epoch: int = 0, rng_state: dict | None = None,
                    optimizer: Optimizer | None = None) -> None:
    lines = [f"{CKPT_MAGIC} {CKPT_VERSION}",
             "@config " + _kv(m.cfg.to_dict()),
             f"@head classes={m.n_classes} loss={m.loss_kind}",
             f"@progress epoch={epoch}"]
    if rng_state is not None:
        lines.append("@rng " + json.dumps(rng_state, sort_keys=True))
    if optimizer is not None:
        lines.append("@optim " + _kv({"kind": optimizer.kind, "t": optimizer.t,
                                      **{k: fmt(v) for k, v in optimizer.hyper().items()}}))
    for name, arr in m.params().items():
        _write_block(lines, name, arr)
    if optimizer is not None:
        for slot, bufs in optimizer.state.items():
            for name, arr in bufs.items():
                _write_block(lines, f"opt.{slot}.{name}", arr)
    lines.append("@end")
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_checkpoint(path, expected_config: CellConfig | None = None) -> Checkpoint:
    with open(path) as fh:
        lines = fh.read().split("\n")
    if not lines or not lines[0].startswith(CKPT_MAGIC):
        raise CheckpointParseError(f"{path}: missing {CKPT_MAGIC} header")
    version = lines[0][len(CKPT_MAGIC):].strip()
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {version!r}")

    meta: dict = {}
    blocks: dict[str, np.ndarray] = {}
    ended = False
    i = 1
    while i < len(lines):
        line = lines[i]
        lineno = i + 1
        i += 1
        if not line:
            continue
        if line == "@end":
            ended = True
            break
        tag, _, rest = line.partition(" ")
        if tag == "@param":
            parts = rest.split()
            if len(parts) != 3:
                raise CheckpointParseError(f"line {lineno}: malformed @param header")
            name = parts[0]
            try:
                rows, cols = int(parts[1]), int(parts[2])
            except ValueError:
                raise CheckpointParseError(f"line {lineno}: non-integer block shape") from None
            if i + rows > len(lines):
                raise CheckpointParseError(f"line {lineno}: block {name} truncated")
            try:
                data = [[float(v) for v in lines[i + r].split()] for r in range(rows)]
            except ValueError as exc:
                raise CheckpointParseError(f"line {lineno}: bad value in block {name}: {exc}") from None
            if any(len(r) != cols for r in data):
                raise CheckpointParseError(f"line {lineno}: block {name} has ragged rows")
            blocks[name] = np.array(data, dtype=np.float64).reshape(rows, cols)
            i += rows
        elif tag == "@rng":
            meta["rng"] = json.loads(rest)
        elif tag in ("@config", "@head", "@progress", "@optim"):
            meta[tag[1:]] = _parse_kv(rest, lineno)
        else:
            raise CheckpointParseError(f"line {lineno}: unknown record {tag!r}")
    if not ended:
        raise CheckpointParseError(f"{path}: truncated checkpoint (no @end)")
    for key in ("config", "head"):
        if key not in meta:
            raise CheckpointParseError(f"{path}: missing @{key} record")

    try:
        cfg = CellConfig.from_dict(meta["config"])
    except (KeyError, ValueError) as exc:
        raise CheckpointParseError(f"{path}: bad @config record: {exc}") from None
    if expected_config is not None and cfg != expected_config:
        raise CheckpointConfigError(
            f"{path}: checkpoint config {cfg.to_dict()} does not match expected {expected_config.to_dict()}")
    n_classes = int(meta["head"]["classes"])
    model = Model(cfg, CellParams.zeros(cfg), np.zeros((n_classes, cfg.hidden_size)),
                  np.zeros(n_classes), meta["head"].get("loss", "per_step"))
    for name, dest in model.params().items():
        if name not in blocks:
            raise CheckpointShapeError(f"{path}: parameter block {name} missing")
        src = blocks.pop(name)
        if src.size != dest.size or (src.shape != dest.shape and src.shape != (1, dest.size)):
            raise CheckpointShapeError(f"{path}: block {name} has shape {src.shape}, model needs {dest.shape}")
        dest[...] = src.reshape(dest.shape)

    opt = None
    if "optim" in meta:
        o = dict(meta["optim"])
        kind, t = o.pop("kind"), int(o.pop("t"))
        opt = make_optimizer(kind, **{k: float(v) for k, v in o.items()})
        opt.t = t
        params = model.params()
        for name in list(blocks):
            if name.startswith("opt."):
                _, slot, pname = name.split(".", 2)
                if slot not in opt.state or pname not in params:
                    raise CheckpointShapeError(f"{path}: unexpected optimizer block {name}")
                opt.state[slot][pname] = blocks.pop(name).reshape(params[pname].shape)
    if blocks:
        raise CheckpointShapeError(f"{path}: unexpected blocks {sorted(blocks)}")
    epoch = int(meta.get("progress", {}).get("epoch", 0))
    return Checkpoint(model, epoch, meta.get("rng"), opt)


def load_checkpoint(path, expected_config: CellConfig | None = None) -> Model:
    return read_checkpoint(path, expected_config).model


# -- metrics ------------------------------------------------------------------------------

def config_hash(config: dict) -> str:
    canon = ";".join(f"{k}={config[k]}" for k in sorted(config))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


@dataclass
class MetricsRecord:
    run_id: str
    epoch: int
    split: str
    loss: float
    accuracy: float | None = None
    bpc: float | None = None
    wall_time: float | None = None
    config_hash: str = ""

    def to_line(self) -> str:
        fields = {"run": self.run_id, "epoch": self.epoch, "split": self.split, "loss": fmt(self.loss)}
        if self.accuracy is not None:
            fields["acc"] = fmt(self.accuracy)
        if self.bpc is not None:
            fields["bpc"] = fmt(self.bpc)
        if self.wall_time is not None:
            fields["wall"] = fmt(self.wall_time)
        fields["config"] = self.config_hash
        return _kv(fields)

    @classmethod
    def from_line(cls, line: str) -> "MetricsRecord":
        kv = dict(part.split("=", 1) for part in line.split())
        opt = lambda k: float(kv[k]) if k in kv else None  # noqa: E731
        return cls(kv["run"], int(kv["epoch"]), kv["split"], float(kv["loss"]),
                   opt("acc"), opt("bpc"), opt("wall"), kv.get("config", ""))


def append_metrics(record: MetricsRecord, path) -> None:
    line = record.to_line() + "\n"
    with open(path, "a") as fh:
        fh.write(line)
        fh.flush()


def read_metrics(path) -> list[MetricsRecord]:
    """Complete lines only; a partial trailing line from an interrupted write is ignored."""
    with open(path) as fh:
        text = fh.read()
    lines = text.split("\n")
    complete = lines[:-1]  # the last element is "" or an unterminated fragment
    return [MetricsRecord.from_line(l) for l in complete if l.strip()]


# -- dataset files ------------------------------------------------------------------------

@dataclass
class Dataset:
    task: str
    L: int
    seed: int
    samples: list


def write_dataset(path, samples, task: str, L: int, seed: int) -> None:
    if task not in ("adding", "counting"):
        raise DatasetError(f"unknown task {task!r}")
    with open(path, "w") as fh:
        fh.write(f"#task={task} L={L} seed={seed} version={DATASET_VERSION}\n")
        for s in samples:
            if task == "adding":
                fh.write(f"{s.a_bits}\t{s.b_bits}\t{s.s_bits}\n")
            else:
                fh.write(f"{s.bits}\t{s.count}\n")


def _bitstring(s: str, L: int, lineno: int) -> str:
    if len(s) != L or set(s) - {"0", "1"}:
        raise DatasetError(f"line {lineno}: expected {L} binary digits, got {s!r}")
    return s


def read_dataset(path, task: str) -> Dataset:
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith("#"):
            raise DatasetError("line 1: missing #task header")
        try:
            meta = dict(part.split("=", 1) for part in header[1:].split())
            L, seed = int(meta["L"]), int(meta["seed"])
        except (KeyError, ValueError):
            raise DatasetError(f"line 1: malformed header {header!r}") from None
        if meta.get("task") != task:
            raise DatasetError(f"line 1: file holds task {meta.get('task')!r}, expected {task!r}")
        if meta.get("version") != DATASET_VERSION:
            raise DatasetError(f"line 1: unsupported dataset version {meta.get('version')!r}")
        samples = []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if task == "adding":
                if len(cols) != 3:
                    raise DatasetError(f"line {lineno}: expected 3 tab-separated fields")
                a, b, s = (_bitstring(c, L, lineno) for c in cols)
                sample = AddingSample(a, b, s)
                if not sample.is_consistent():
                    raise DatasetError(f"line {lineno}: {a} + {b} != {s} (LSB-first)")
            else:
                if len(cols) != 2:
                    raise DatasetError(f"line {lineno}: expected 2 tab-separated fields")
                bits = _bitstring(cols[0], L, lineno)
                try:
                    count = int(cols[1])
                except ValueError:
                    raise DatasetError(f"line {lineno}: count {cols[1]!r} is not an integer") from None
                if count != trailing_run(bits):
                    raise DatasetError(f"line {lineno}: count {count} != trailing run {trailing_run(bits)}")
                sample = CountingSample(bits, count)
            samples.append(sample)
    return Dataset(task, L, seed, samples)

