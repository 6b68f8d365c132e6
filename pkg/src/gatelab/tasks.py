"""Synthetic adding/counting tasks and the character-level corpus pipeline.

Adding: two operands written least-significant bit first; the target at step
``t`` is bit ``t`` of the sum, so each output depends on the carry from step
``t-1``. Counting: predict the length of the constant run that ends the bit
string, as an ``L``-way classification at the last step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numkit import Rng

ADDING_TRAIN, ADDING_TEST = 10_000, 5_000


def decode_bits(bits: str) -> int:
    """LSB-first binary string -> int."""
    return int(bits[::-1], 2) if bits else 0


def encode_bits(value: int, length: int) -> str:
    s = format(value, "b")[::-1]
    if len(s) > length:
        raise ValueError(f"{value} does not fit in {length} bits")
    return s.ljust(length, "0")


@dataclass(frozen=True)
class AddingSample:
    a_bits: str
    b_bits: str
    s_bits: str

    def __post_init__(self):
        if not (len(self.a_bits) == len(self.b_bits) == len(self.s_bits)):
            raise ValueError("adding operands and sum must share one length")

    @property
    def length(self) -> int:
        return len(self.a_bits)

    def is_consistent(self) -> bool:
        return decode_bits(self.a_bits) + decode_bits(self.b_bits) == decode_bits(self.s_bits)

    def carries(self) -> np.ndarray:
        """Carry-out of each bit position, from the integer sum."""
        a, b = decode_bits(self.a_bits), decode_bits(self.b_bits)
        out = np.zeros(self.length, dtype=np.int8)
        for t in range(self.length):
            mask = (1 << (t + 1)) - 1
            out[t] = ((a & mask) + (b & mask)) >> (t + 1)
        return out


@dataclass(frozen=True)
class CountingSample:
    bits: str
    count: int

    def __post_init__(self):
        if not 1 <= self.count <= len(self.bits):
            raise ValueError(f"count {self.count} outside 1..{len(self.bits)}")


def make_adding_sample(a_bits: str, b_bits: str) -> AddingSample:
    L = len(a_bits)
    return AddingSample(a_bits, b_bits, encode_bits(decode_bits(a_bits) + decode_bits(b_bits), L))


def gen_adding_sample(L: int, rng: Rng) -> AddingSample:
    """Uniform operands, resampled until the sum fits in ``L`` bits."""
    if L < 2:
        raise ValueError("adding samples need L >= 2")
    while True:
        a = "".join("01"[v] for v in rng.bits(L))
        b = "".join("01"[v] for v in rng.bits(L))
        total = decode_bits(a) + decode_bits(b)
        if total < (1 << L):
            return AddingSample(a, b, encode_bits(total, L))


def trailing_run(bits: str) -> int:
    last = bits[-1]
    n = 0
    for ch in reversed(bits):
        if ch != last:
            break
        n += 1
    return n


def gen_counting_sample(L: int, rng: Rng) -> CountingSample:
    if L < 1:
        raise ValueError("counting samples need L >= 1")
    bits = "".join("01"[v] for v in rng.bits(L))
    return CountingSample(bits, trailing_run(bits))


def gen_adding_set(n: int, L: int, rng: Rng) -> list[AddingSample]:
    return [gen_adding_sample(L, rng) for _ in range(n)]


def gen_counting_set(n: int, L: int, rng: Rng) -> list[CountingSample]:
    return [gen_counting_sample(L, rng) for _ in range(n)]


def _bit_matrix(strings) -> np.ndarray:
    return np.array([np.frombuffer(s.encode(), dtype=np.uint8) - 48 for s in strings], dtype=np.int64)


def encode_adding(x: AddingSample):
    """Single sample -> ``(inputs (L, 2), targets (L,))``."""
    xs, ys = encode_adding_batch([x])
    return xs[:, 0], ys[:, 0]


def encode_adding_batch(samples):
    """Time-major batch: inputs ``(L, N, 2)`` holding ``[a_t, b_t]``, targets ``(L, N)``."""
    a = _bit_matrix(s.a_bits for s in samples)
    b = _bit_matrix(s.b_bits for s in samples)
    s = _bit_matrix(x.s_bits for x in samples)
    xs = np.stack([a.T, b.T], axis=-1).astype(np.float64)
    return xs, s.T.copy()


def encode_counting(x: CountingSample, L: int | None = None):
    xs, ys = encode_counting_batch([x], L)
    return xs[:, 0], int(ys[0])


def encode_counting_batch(samples, L: int | None = None):
    """One-hot inputs ``(L, N, 2)`` (bit 0 -> [1,0], bit 1 -> [0,1]) and final targets ``count - 1``."""
    bits = _bit_matrix(s.bits for s in samples)
    if L is not None and bits.shape[1] != L:
        raise ValueError(f"samples have length {bits.shape[1]}, expected {L}")
    onehot = np.eye(2)[bits.T]
    targets = np.array([s.count - 1 for s in samples], dtype=np.int64)
    return onehot, targets


def sequence_accuracy(pred: np.ndarray, targets: np.ndarray) -> float:
    """Fraction of sequences whose every step is predicted correctly (time-major arrays)."""
    return float(np.mean(np.all(pred == targets, axis=0)))


def convergence_epoch(accuracy_history) -> float:
    """1-indexed first epoch with perfect sequence accuracy, or ``math.inf``."""
    history = list(accuracy_history)
    if not history:
        raise ValueError("empty accuracy history")
    for e, acc in enumerate(history, start=1):
        if acc == 1.0:
            return e
    return math.inf


@dataclass
class CharCorpus:
    vocab: dict
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    unroll: int

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def decode(self, idx) -> str:
        inv = {i: ch for ch, i in self.vocab.items()}
        return "".join(inv[int(i)] for i in idx)


def build_char_corpus(text: str, unroll: int = 50, fractions=(0.9, 0.05, 0.05)) -> CharCorpus:
    """Index a text with a first-appearance vocabulary and cut contiguous splits."""
    if not text:
        raise ValueError("empty text")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"split fractions must be three non-negatives summing to 1, got {fractions}")
    vocab: dict[str, int] = {}
    for ch in text:
        if ch not in vocab:
            vocab[ch] = len(vocab)
    lut = np.zeros(max(map(ord, vocab)) + 1, dtype=np.int64)
    for ch, i in vocab.items():
        lut[ord(ch)] = i
    stream = lut[np.frombuffer(text.encode("utf-32-le"), dtype=np.uint32)]
    n = len(stream)
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    return CharCorpus(vocab, stream[:n_train], stream[n_train:n_train + n_valid],
                      stream[n_train + n_valid:], unroll)


def next_char_pairs(stream: np.ndarray):
    """``(inputs, targets)`` where each target is the character after its input."""
    return stream[:-1], stream[1:]


def char_batches(stream: np.ndarray, batch_size: int, unroll: int):
    """Yield time-major ``(inputs (T, B), targets (T, B))`` windows for stateful truncated BPTT.

    The stream is cut into ``batch_size`` contiguous tracks; consecutive windows
    continue each track, so hidden state may carry over between them.
    """
    inputs, targets = next_char_pairs(stream)
    per_track = len(inputs) // batch_size
    if per_track < 1:
        raise ValueError("stream too short for the batch size")
    xs = inputs[:per_track * batch_size].reshape(batch_size, per_track).T
    ys = targets[:per_track * batch_size].reshape(batch_size, per_track).T
    for start in range(0, per_track, unroll):
        yield xs[start:start + unroll], ys[start:start + unroll]


def one_hot(idx: np.ndarray, k: int) -> np.ndarray:
    return np.eye(k)[idx]


def bits_per_char(mean_nats: float) -> float:
    return mean_nats / math.log(2.0)
