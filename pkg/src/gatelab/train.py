"""Training loops and the desk-scale experiment runners for the three tasks."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tasks
from .cells import CellConfig
from .engine import (FINAL, PER_STEP, Model, bptt_backward, final_state, loss_and_grad,
                     sequence_loss, softmax_xent, unroll_forward, zero_state)
from .numkit import Rng
from .optim import Optimizer, clip_global_norm, make_optimizer

EVAL_CHUNK = 2500


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    test_loss: float
    test_acc: float
    wall_time: float = 0.0


@dataclass
class RunResult:
    model: Model
    history: list = field(default_factory=list)

    @property
    def accuracies(self):
        return [h.test_acc for h in self.history if h.epoch > 0]

    @property
    def converged_at(self) -> float:
        accs = self.accuracies
        return tasks.convergence_epoch(accs) if accs else math.inf


def data_streams(seed: int):
    """Fixed child streams so every architecture sees the same data for a seed."""
    root = Rng(seed)
    return {"train": root.spawn(1), "test": root.spawn(2), "init": root.spawn(3), "shuffle": root.spawn(4)}


def fit_epoch(model: Model, opt: Optimizer, xs, ys, batch_size: int, clip: float | None, rng: Rng) -> float:
    """One shuffled pass; returns the mean training loss over batches."""
    n = xs.shape[1]
    order = rng.permutation(n)
    total, count = 0.0, 0
    params = model.params()
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        loss, grads = loss_and_grad(model, xs[:, idx], ys[..., idx])
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss}")
        if clip:
            clip_global_norm(grads, clip)
        opt.step(params, grads)
        total += loss
        count += 1
    return total / count


def predict_logits(model: Model, xs) -> np.ndarray:
    outs = []
    for start in range(0, xs.shape[1], EVAL_CHUNK):
        _, logits, _ = unroll_forward(model, xs[:, start:start + EVAL_CHUNK], keep_caches=False)
        outs.append(logits)
    return np.concatenate(outs, axis=-2)


def evaluate(model: Model, xs, ys):
    """``(mean loss, accuracy)``; per-step heads score whole-sequence accuracy."""
    logits = predict_logits(model, xs)
    losses, _ = softmax_xent(logits, ys)
    pred = logits.argmax(axis=-1)
    if model.loss_kind == PER_STEP:
        acc = tasks.sequence_accuracy(pred, ys)
    else:
        acc = float(np.mean(pred == ys))
    return float(losses.mean()), acc


def train(model: Model, opt: Optimizer, train_data, test_data, epochs: int, batch_size: int,
          clip: float | None, rng: Rng, stop_on_converge: bool = False, callback=None) -> RunResult:
    """Epoch loop with an epoch-0 evaluation before any update."""
    result = RunResult(model)
    t0 = time.perf_counter()
    test_loss, test_acc = evaluate(model, *test_data)
    result.history.append(EpochStats(0, math.nan, test_loss, test_acc, 0.0))
    if callback:
        callback(result.history[-1])
    for epoch in range(1, epochs + 1):
        train_loss = fit_epoch(model, opt, *train_data, batch_size, clip, rng)
        test_loss, test_acc = evaluate(model, *test_data)
        result.history.append(EpochStats(epoch, train_loss, test_loss, test_acc, time.perf_counter() - t0))
        if callback:
            callback(result.history[-1])
        if stop_on_converge and test_acc == 1.0:
            break
    return result


@dataclass
class TaskSettings:
    hidden: int = 4
    epochs: int = 100
    batch_size: int = 20
    opt: str = "adam"
    lr: float | None = None
    clip: float | None = 5.0
    n_train: int = tasks.ADDING_TRAIN
    n_test: int = tasks.ADDING_TEST


def adding_data(L: int, seed: int, n_train: int, n_test: int):
    streams = data_streams(seed)
    train_set = tasks.gen_adding_set(n_train, L, streams["train"])
    test_set = tasks.gen_adding_set(n_test, L, streams["test"])
    return train_set, test_set


def counting_data(L: int, seed: int, n_train: int, n_test: int):
    streams = data_streams(seed)
    return (tasks.gen_counting_set(n_train, L, streams["train"]),
            tasks.gen_counting_set(n_test, L, streams["test"]))


def run_adding(arch: str, refine: str, gates, L: int, seed: int, settings: TaskSettings | None = None,
               data=None, stop_on_converge: bool = True, callback=None) -> RunResult:
    s = settings or TaskSettings()
    train_set, test_set = data or adding_data(L, seed, s.n_train, s.n_test)
    streams = data_streams(seed)
    cfg = CellConfig(arch, 2, s.hidden, refine, gates)
    model = Model.create(cfg, 2, streams["init"], PER_STEP)
    opt = make_optimizer(s.opt, s.lr)
    return train(model, opt, tasks.encode_adding_batch(train_set), tasks.encode_adding_batch(test_set),
                 s.epochs, s.batch_size, s.clip, streams["shuffle"], stop_on_converge, callback)


def run_counting(arch: str, refine: str, gates, L: int, seed: int, settings: TaskSettings | None = None,
                 data=None, callback=None) -> RunResult:
    s = settings or TaskSettings(hidden=2)
    train_set, test_set = data or counting_data(L, seed, s.n_train, s.n_test)
    streams = data_streams(seed)
    cfg = CellConfig(arch, 2, s.hidden, refine, gates)
    model = Model.create(cfg, L, streams["init"], FINAL)
    opt = make_optimizer(s.opt, s.lr)
    return train(model, opt, tasks.encode_counting_batch(train_set, L),
                 tasks.encode_counting_batch(test_set, L), s.epochs, s.batch_size, s.clip,
                 streams["shuffle"], False, callback)


# -- character-level language model ---------------------------------------------------------

@dataclass
class CharLMSettings:
    hidden: int = 128
    unroll: int = 50
    batch_size: int = 32
    epochs: int = 10
    opt: str = "adam"
    lr: float | None = 2e-3
    clip: float | None = 5.0


def charlm_epoch(model: Model, opt: Optimizer, stream, batch_size: int, unroll: int,
                 clip: float | None) -> float:
    """Stateful truncated BPTT over one pass of ``stream``; returns mean training nats/char."""
    V = model.cfg.input_size
    state = zero_state(model, batch_size)
    params = model.params()
    total, count = 0.0, 0
    for xi, yi in tasks.char_batches(stream, batch_size, unroll):
        loss, dlogits, caches, _ = sequence_loss(model, tasks.one_hot(xi, V), yi, state)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss}")
        grads = bptt_backward(model, caches, dlogits)
        if clip:
            clip_global_norm(grads, clip)
        opt.step(params, grads)
        state = final_state(caches)
        total += loss * yi.size
        count += yi.size
    return total / count


def charlm_eval(model: Model, stream, batch_size: int, unroll: int) -> float:
    """Mean nats/char over ``stream`` with state carried across windows."""
    V = model.cfg.input_size
    state = zero_state(model, batch_size)
    total, count = 0.0, 0
    for xi, yi in tasks.char_batches(stream, batch_size, unroll):
        _, logits, caches = unroll_forward(model, tasks.one_hot(xi, V), state, keep_caches=False)
        losses, _ = softmax_xent(logits, yi)
        total += float(losses.sum())
        count += losses.size
        state = final_state(caches)
    return total / count


def run_charlm(corpus: tasks.CharCorpus, refine: str, gates, seed: int,
               settings: CharLMSettings | None = None, callback=None, arch: str = "lstm"):
    """Returns ``(model, history)`` where history rows are ``EpochStats`` with BPC as ``test_acc``."""
    s = settings or CharLMSettings()
    V = corpus.vocab_size
    cfg = CellConfig(arch, V, s.hidden, refine, gates)
    model = Model.create(cfg, V, data_streams(seed)["init"], PER_STEP)
    opt = make_optimizer(s.opt, s.lr)
    history = []
    t0 = time.perf_counter()
    eval_batch = max(1, min(s.batch_size, (len(corpus.valid) - 1) // s.unroll))
    for epoch in range(1, s.epochs + 1):
        train_nats = charlm_epoch(model, opt, corpus.train, s.batch_size, s.unroll, s.clip)
        valid_nats = charlm_eval(model, corpus.valid, eval_batch, s.unroll)
        history.append(EpochStats(epoch, train_nats, valid_nats, tasks.bits_per_char(valid_nats),
                                  time.perf_counter() - t0))
        if callback:
            callback(history[-1])
    return model, history
