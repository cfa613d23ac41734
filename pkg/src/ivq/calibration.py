"""Token sequence loading and calibration/held-out splitting.

On-disk format: UTF-8 text, one sequence per line, whitespace-separated
decimal token ids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ParseError, TokenRangeError


@dataclass
class CalibSet:
    sequences: list[np.ndarray]
    vocab: int
    label: str = ""

    def __post_init__(self):
        self.sequences = [np.asarray(s, dtype=np.int64) for s in self.sequences]
        for s in self.sequences:
            if s.size == 0:
                raise DomainError("sequences must be non-empty")
            if s.min() < 0 or s.max() >= self.vocab:
                raise TokenRangeError("token id out of vocabulary")

    def __len__(self) -> int:
        return len(self.sequences)


def load_sequences(
    path, max_sequences: int, seq_len: int, vocab: int | None = None
) -> CalibSet:
    """First ``max_sequences`` lines, each truncated to ``seq_len`` tokens.

    When ``vocab`` is given every id is range-checked against it;
    otherwise the vocabulary size is inferred as max id + 1.
    """
    sequences: list[np.ndarray] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if len(sequences) >= max_sequences:
                break
            if not line.strip():
                continue
            try:
                ids = [int(tok) for tok in line.split()]
            except ValueError as e:
                raise ParseError(f"{path}: line {lineno}: {e}") from e
            if any(t < 0 for t in ids):
                raise ParseError(f"{path}: line {lineno}: negative token id")
            sequences.append(np.asarray(ids[:seq_len], dtype=np.int64))
    if not sequences:
        raise DomainError(f"{path}: no token sequences found")
    if vocab is None:
        vocab = int(max(int(s.max()) for s in sequences)) + 1
    return CalibSet(sequences, vocab=vocab, label=str(path))


def split_eval(cs: CalibSet, fraction: float, seed: int) -> tuple[CalibSet, CalibSet]:
    """Deterministic disjoint split; first part holds ``fraction`` of the set."""
    if not 0 < fraction < 1:
        raise DomainError("fraction must be in (0, 1)")
    n = len(cs)
    if n < 2:
        raise DomainError("need at least 2 sequences to split")
    k = int(round(fraction * n))
    k = min(max(k, 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    first = [cs.sequences[i] for i in sorted(order[:k])]
    second = [cs.sequences[i] for i in sorted(order[k:])]
    return (
        CalibSet(first, cs.vocab, cs.label + ":calib"),
        CalibSet(second, cs.vocab, cs.label + ":heldout"),
    )
