"""Dense float64 linear algebra, loss primitives, and a seeded random source.

Matrices are plain 2-D float64 numpy arrays in row-major (C) order.  All
reductions here are single-threaded numpy calls so repeated evaluation of
the same inputs is bit-identical, which the search's accept/reject
decisions rely on.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DomainError, ShapeError, TokenRangeError

Matrix = np.ndarray


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> Matrix:
    """Coerce to a 2-D float64 array, optionally checking its shape."""
    m = np.ascontiguousarray(data, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ShapeError(f"expected {cols} cols, got {m.shape[1]}")
    if not np.isfinite(m).all():
        raise DomainError("matrix entries must be finite")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def relu(x: Matrix) -> Matrix:
    return np.maximum(x, 0.0)


def softmax_cross_entropy(logits: Matrix, targets: Sequence[int]) -> float:
    """Mean negative log-softmax of the target ids, in nats per token.

    One logit row per target position; stabilized by per-row max
    subtraction.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError("logits must be 2-D (positions x vocab)")
    n, vocab = logits.shape
    if vocab < 2:
        raise ShapeError("vocabulary size must be >= 2")
    if targets.shape != (n,):
        raise ShapeError(f"expected {n} targets, got shape {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise TokenRangeError("target id out of vocabulary")
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    picked = logits[np.arange(n), targets]
    return float(np.mean(lse - picked))


def mse(a: Matrix, b: Matrix) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(d * d))


class RandomSource:
    """Seeded random generator with derived sub-streams.

    A source is identified by a 64-bit seed plus a key tuple; identical
    (seed, key) always yields the identical draw sequence.  ``substream``
    derives an independent generator keyed by e.g. (step, layer) so the
    search's proposal at a given step does not depend on how earlier
    draws were consumed.
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.key = tuple(int(k) & 0xFFFFFFFFFFFFFFFF for k in key)
        self._rng = np.random.default_rng(
            np.random.SeedSequence([self.seed, *self.key])
        )

    def substream(self, *key: int) -> "RandomSource":
        return RandomSource(self.seed, self.key + tuple(key))

    def gaussian(self, mean, stddev: float) -> np.ndarray:
        """Independent draws N(mean_i, stddev^2); stddev 0 returns mean exactly."""
        mean = np.asarray(mean, dtype=np.float64)
        if stddev < 0:
            raise DomainError("stddev must be >= 0")
        if stddev == 0.0:
            return mean.copy()
        return mean + stddev * self._rng.standard_normal(mean.shape)

    def integer(self, low: int, high: int) -> int:
        """One uniform integer in [low, high)."""
        return int(self._rng.integers(low, high))

    def subset(self, n: int, k: int) -> np.ndarray:
        """k distinct indices drawn uniformly from range(n), unsorted."""
        return self._rng.choice(n, size=k, replace=False)

    def permutation(self, n: int) -> np.ndarray:
        return self._rng.permutation(n)

    def uniform(self, low: float, high: float, size=None):
        return self._rng.uniform(low, high, size=size)

    def standard_normal(self, size=None):
        return self._rng.standard_normal(size)
