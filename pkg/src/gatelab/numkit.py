"""Dense float64 kernels, activations and seeded initialization.

Matrices and vectors are plain ``numpy.ndarray`` objects of dtype float64.
Cell code works on row batches: a "vector" argument may carry a leading
batch axis, and every function here is elementwise or row-wise so the batch
axis passes straight through.

Randomness comes from :class:`Rng`, a thin wrapper over numpy's PCG64 bit
generator. PCG64 is a documented, platform-independent algorithm, so a given
seed yields the same stream everywhere.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

DTYPE = np.float64


class ContractError(ValueError):
    """Raised when an operation's shape or domain precondition is violated."""


class Rng:
    """Seeded PCG64 stream. One instance per run."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low, high, size=None):
        return self._gen.uniform(low, high, size)

    def bits(self, n: int) -> np.ndarray:
        return self._gen.integers(0, 2, size=n, dtype=np.int8)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def spawn(self, offset: int) -> "Rng":
        """Independent child stream derived from the seed, e.g. for test-set generation."""
        return Rng((self.seed * 1_000_003 + offset) % (1 << 63))

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ContractError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def sigmoid(v: np.ndarray) -> np.ndarray:
    # expit is overflow-safe; in float64 it rounds to exactly 0/1 beyond |v| ~ 37/745
    return expit(v)


def tanh_act(v: np.ndarray) -> np.ndarray:
    return np.tanh(v)


def init_xavier(rows: int, cols: int, rng: Rng) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ContractError(f"init_xavier needs positive dims, got {rows}x{cols}")
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols)).astype(DTYPE)
