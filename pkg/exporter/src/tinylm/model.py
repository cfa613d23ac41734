"""Decoder-only transformer with ReLU feed-forward blocks.

Pre-LayerNorm, learned positional embeddings, multi-head causal
attention without biases, biased FFN projections.  This mirrors the
IVQ1 model schema tensor for tensor so exported checkpoints load
unchanged.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class Block(nn.Module):
    def __init__(self, d_model: int, d_ff: int, n_heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.wq = nn.Linear(d_model, d_model, bias=False)
        self.wk = nn.Linear(d_model, d_model, bias=False)
        self.wv = nn.Linear(d_model, d_model, bias=False)
        self.wo = nn.Linear(d_model, d_model, bias=False)
        self.ln2 = nn.LayerNorm(d_model)
        self.up = nn.Linear(d_model, d_ff, bias=True)
        self.down = nn.Linear(d_ff, d_model, bias=True)
        self.n_heads = n_heads

    def attend(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        dh = d // self.n_heads
        q = self.wq(x).view(b, n, self.n_heads, dh).transpose(1, 2)
        k = self.wk(x).view(b, n, self.n_heads, dh).transpose(1, 2)
        v = self.wv(x).view(b, n, self.n_heads, dh).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(dh)
        mask = torch.triu(torch.ones(n, n, dtype=torch.bool, device=x.device), diagonal=1)
        scores = scores.masked_fill(mask, float("-inf"))
        ctx = F.softmax(scores, dim=-1) @ v
        return self.wo(ctx.transpose(1, 2).reshape(b, n, d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attend(self.ln1(x))
        h = self.ln2(x)
        return x + self.down(F.relu(self.up(h)))


class TinyDecoder(nn.Module):
    def __init__(self, vocab: int, d_model: int, d_ff: int, n_layers: int,
                 n_heads: int, context: int):
        super().__init__()
        if d_ff % 2 != 0:
            raise ValueError("d_ff must be even")
        if d_model % n_heads != 0:
            raise ValueError("n_heads must divide d_model")
        self.vocab = vocab
        self.context = context
        self.tok_emb = nn.Embedding(vocab, d_model)
        self.pos_emb = nn.Embedding(context, d_model)
        self.blocks = nn.ModuleList(
            Block(d_model, d_ff, n_heads) for _ in range(n_layers)
        )
        self.ln_f = nn.LayerNorm(d_model)
        self.head = nn.Linear(d_model, vocab, bias=False)

    def forward(self, idx: torch.Tensor) -> torch.Tensor:
        b, n = idx.shape
        pos = torch.arange(n, device=idx.device)
        x = self.tok_emb(idx) + self.pos_emb(pos)[None, :, :]
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_f(x))
