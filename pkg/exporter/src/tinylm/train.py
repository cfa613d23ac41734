"""Character-level training of the tiny decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import TrainingError
from .model import TinyDecoder


@dataclass
class TrainedBundle:
    model: TinyDecoder
    charset: str
    train_ids: np.ndarray
    eval_ids: np.ndarray
    d_ff: int
    n_heads: int
    final_loss: float


def encode(text: str, charset: str) -> np.ndarray:
    index = {c: i for i, c in enumerate(charset)}
    return np.asarray([index[c] for c in text], dtype=np.int64)


def train_tiny(
    text: str,
    layers: int = 2,
    d_model: int = 64,
    d_ff: int = 128,
    n_heads: int = 4,
    context: int = 128,
    steps: int = 3000,
    seed: int = 0,
    batch_size: int = 32,
    lr: float = 3e-4,
    eval_fraction: float = 0.1,
) -> TrainedBundle:
    """Deterministic CPU training; raises TrainingError on divergence."""
    if not text:
        raise TrainingError("corpus is empty")
    if d_ff % 2 != 0:
        raise TrainingError("d_ff must be even")
    charset = "".join(sorted(set(text)))
    vocab = len(charset)
    if vocab > 256:
        raise TrainingError(f"character vocabulary too large: {vocab} > 256")
    if vocab < 2:
        raise TrainingError("corpus needs at least 2 distinct characters")

    ids = encode(text, charset)
    if ids.size < 2 * (context + 1):
        raise TrainingError("corpus too small for the context window")
    split = int(ids.size * (1 - eval_fraction))
    train_ids, eval_ids = ids[:split], ids[split:]

    torch.manual_seed(seed)
    torch.set_num_threads(1)  # fixed reduction order, identical runs bit for bit
    model = TinyDecoder(vocab, d_model, d_ff, layers, n_heads, context)
    opt = torch.optim.AdamW(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)

    data = torch.from_numpy(train_ids)
    final_loss = math.inf
    for step in range(steps):
        starts = torch.randint(0, data.size(0) - context - 1, (batch_size,), generator=gen)
        x = torch.stack([data[s : s + context] for s in starts])
        y = torch.stack([data[s + 1 : s + context + 1] for s in starts])
        logits = model(x)
        loss = F.cross_entropy(logits.reshape(-1, vocab), y.reshape(-1))
        if not torch.isfinite(loss):
            raise TrainingError(f"training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        final_loss = float(loss.detach())

    model.eval()
    return TrainedBundle(model, charset, train_ids, eval_ids, d_ff, n_heads, final_loss)


def eval_perplexity(bundle: TrainedBundle, seq_len: int = 128, max_seqs: int = 16) -> float:
    """Mean next-token perplexity of the trained model on the eval split."""
    model, ids = bundle.model, bundle.eval_ids
    total_nats, total_targets = 0.0, 0
    with torch.no_grad():
        for i in range(max_seqs):
            chunk = ids[i * seq_len : (i + 1) * seq_len]
            if chunk.size < 2:
                break
            x = torch.from_numpy(chunk[None, :])
            logits = model(x)[0]
            nats = F.cross_entropy(logits[:-1], x[0, 1:], reduction="sum")
            total_nats += float(nats)
            total_targets += chunk.size - 1
    if total_targets == 0:
        raise TrainingError("eval split too small")
    return math.exp(total_nats / total_targets)
