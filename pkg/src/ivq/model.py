"""Toy decoder-only transformer with ReLU feed-forward blocks.

Pre-LayerNorm architecture with learned positional embeddings.  Weight
matrices are stored (out_dim, in_dim) and applied as x @ W.T, so the
feed-forward block computes z = relu(x W_up^T + b_up) W_down^T + b_down,
the row-vector form of the column convention W_down f(W_up x + b_up) +
b_down.  Layer indices are 1-based in every public API.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import checkpoint as cio
from .calibration import CalibSet
from .errors import DomainError, FormatError, ShapeError, TokenRangeError
from .numerics import Matrix, RandomSource, matmul, relu, softmax_cross_entropy
from .quantizer import (
    SCALE_FLOOR,
    QuantSpec,
    QuantizedMatrix,
    dequantize_matrix,
    fake_quantize_matrix,
    quantize_matrix,
)

LN_EPS = 1e-5


@dataclass(frozen=True)
class HyperParams:
    layers: int
    d_model: int
    d_ff: int
    vocab: int
    heads: int
    context: int = 128

    def __post_init__(self):
        if self.d_ff % 2 != 0:
            raise DomainError("d_ff must be even (rotation pairs two dimensions)")
        if self.d_model % self.heads != 0:
            raise DomainError("heads must divide d_model")
        if self.vocab < 2:
            raise DomainError("vocab must be >= 2")


@dataclass
class LayerParams:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    wq: Matrix
    wk: Matrix
    wv: Matrix
    wo: Matrix
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w_up: Matrix
    b_up: np.ndarray
    w_down: Matrix
    b_down: np.ndarray


@dataclass
class ModelParams:
    hyper: HyperParams
    tok_emb: Matrix
    pos_emb: Matrix
    layers: list[LayerParams]
    lnf_g: np.ndarray
    lnf_b: np.ndarray
    w_out: Matrix

    def validate(self) -> None:
        h = self.hyper
        if self.tok_emb.shape != (h.vocab, h.d_model):
            raise ShapeError("token embedding shape mismatch")
        if self.pos_emb.shape != (h.context, h.d_model):
            raise ShapeError("positional embedding shape mismatch")
        if self.w_out.shape != (h.vocab, h.d_model):
            raise ShapeError("output projection shape mismatch")
        if len(self.layers) != h.layers:
            raise ShapeError("layer count mismatch")
        for lp in self.layers:
            if lp.w_up.shape != (h.d_ff, h.d_model) or lp.w_down.shape != (h.d_model, h.d_ff):
                raise ShapeError("FFN weight shape mismatch")
            if lp.b_up.shape != (h.d_ff,) or lp.b_down.shape != (h.d_model,):
                raise ShapeError("FFN bias shape mismatch")
            for w in (lp.wq, lp.wk, lp.wv, lp.wo):
                if w.shape != (h.d_model, h.d_model):
                    raise ShapeError("attention weight shape mismatch")


@dataclass
class ActivationTrace:
    """FFN block outputs z for each matched layer, rows = calibration positions."""

    layers: tuple[int, ...] = ()
    values: dict[int, np.ndarray] = field(default_factory=dict)


def replace_layer(params: ModelParams, layer: int, lp: LayerParams) -> ModelParams:
    """New ModelParams sharing every tensor except one layer's record."""
    if not 1 <= layer <= params.hyper.layers:
        raise DomainError(f"layer {layer} out of range")
    layers = list(params.layers)
    layers[layer - 1] = lp
    return replace(params, layers=layers)


def _layernorm(x: Matrix, g: np.ndarray, b: np.ndarray) -> Matrix:
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * g + b


_MASK_CACHE: dict[int, np.ndarray] = {}


def _causal_mask(n: int) -> np.ndarray:
    mask = _MASK_CACHE.get(n)
    if mask is None:
        mask = np.triu(np.ones((n, n), dtype=bool), k=1)
        _MASK_CACHE[n] = mask
    return mask


def _attention(h: Matrix, lp: LayerParams, heads: int) -> Matrix:
    n, d = h.shape
    dh = d // heads
    # (heads, n, dh) stacks so the per-head products run through BLAS
    q = matmul(h, lp.wq.T).reshape(n, heads, dh).transpose(1, 0, 2)
    k = matmul(h, lp.wk.T).reshape(n, heads, dh).transpose(1, 0, 2)
    v = matmul(h, lp.wv.T).reshape(n, heads, dh).transpose(1, 0, 2)
    scores = (q @ k.transpose(0, 2, 1)) / np.sqrt(dh)
    scores[:, _causal_mask(n)] = -np.inf
    scores -= scores.max(axis=2, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=2, keepdims=True)
    ctx = (w @ v).transpose(1, 0, 2).reshape(n, d)
    return matmul(ctx, lp.wo.T)


def ffn_block(x: Matrix, w_up: Matrix, b_up, w_down: Matrix, b_down) -> Matrix:
    if x.shape[1] != w_up.shape[1] or w_down.shape[1] != w_up.shape[0]:
        raise ShapeError("FFN shapes inconsistent with input")
    hidden = relu(matmul(x, w_up.T) + b_up)
    return matmul(hidden, w_down.T) + b_down


def _forward_one(params: ModelParams, tokens: np.ndarray, capture):
    h = params.hyper
    tokens = np.asarray(tokens, dtype=np.int64)
    n = tokens.size
    if n > h.context:
        raise DomainError(f"sequence length {n} exceeds context window {h.context}")
    if tokens.min() < 0 or tokens.max() >= h.vocab:
        raise TokenRangeError("token id out of vocabulary")
    x = params.tok_emb[tokens] + params.pos_emb[:n]
    captured: dict[int, np.ndarray] = {}
    for li, lp in enumerate(params.layers, start=1):
        x = x + _attention(_layernorm(x, lp.ln1_g, lp.ln1_b), lp, h.heads)
        z = ffn_block(_layernorm(x, lp.ln2_g, lp.ln2_b), lp.w_up, lp.b_up, lp.w_down, lp.b_down)
        if li in capture:
            captured[li] = z
        x = x + z
    x = _layernorm(x, params.lnf_g, params.lnf_b)
    return matmul(x, params.w_out.T), captured


def _eval_threads() -> int:
    try:
        return max(1, int(os.environ.get("IVQ_THREADS", "1")))
    except ValueError:
        return 1


def _map_sequences(fn, seqs):
    # results always consumed in sequence order so reductions stay fixed
    n = _eval_threads()
    if n == 1 or len(seqs) <= 1:
        return [fn(s) for s in seqs]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, seqs))


def forward(params: ModelParams, sequences, capture=()):
    """Run every sequence; logits rows are concatenated in sequence order.

    ``capture`` is a set of 1-based layer indices whose FFN outputs are
    collected into the returned ActivationTrace; it never affects logits.
    """
    seqs = sequences.sequences if isinstance(sequences, CalibSet) else list(sequences)
    if len(seqs) == 0:
        raise DomainError("empty corpus")
    capture = frozenset(capture)
    bad = [c for c in capture if not 1 <= c <= params.hyper.layers]
    if bad:
        raise DomainError(f"capture layers out of range: {bad}")
    results = _map_sequences(lambda s: _forward_one(params, s, capture), seqs)
    logits = np.concatenate([r[0] for r in results], axis=0)
    trace = ActivationTrace(layers=tuple(sorted(capture)))
    for li in trace.layers:
        trace.values[li] = np.concatenate([r[1][li] for r in results], axis=0)
    return logits, trace


def evaluate(params: ModelParams, sequences, capture=()):
    """(cross-entropy, trace) from one forward pass over the corpus.

    CE pools next-token targets over all sequences; the trace covers every
    position, including each sequence's last.
    """
    seqs = sequences.sequences if isinstance(sequences, CalibSet) else list(sequences)
    if len(seqs) == 0:
        raise DomainError("empty corpus")
    capture = frozenset(capture)
    results = _map_sequences(lambda s: _forward_one(params, s, capture), seqs)
    total_nats = 0.0
    total_targets = 0
    for (logits, _), s in zip(results, seqs):
        s = np.asarray(s, dtype=np.int64)
        if s.size < 2:
            continue
        total_nats += softmax_cross_entropy(logits[:-1], s[1:]) * (s.size - 1)
        total_targets += s.size - 1
    if total_targets == 0:
        raise DomainError("corpus has no next-token targets")
    trace = ActivationTrace(layers=tuple(sorted(capture)))
    for li in trace.layers:
        trace.values[li] = np.concatenate([r[1][li] for r in results], axis=0)
    return total_nats / total_targets, trace


def corpus_cross_entropy(params: ModelParams, sequences, spec: QuantSpec | None = None) -> float:
    """Mean next-token cross-entropy in nats, pooled over all targets."""
    if spec is not None:
        params = quantize_params(params, spec)
    ce, _ = evaluate(params, sequences)
    return ce


def perplexity(params: ModelParams, corpus, spec: QuantSpec | None = None) -> float:
    return float(np.exp(corpus_cross_entropy(params, corpus, spec)))


def weight_items(params: ModelParams):
    """(name, matrix) pairs for every quantizable weight matrix."""
    yield "embed.tok", params.tok_emb
    yield "embed.pos", params.pos_emb
    for li, lp in enumerate(params.layers, start=1):
        yield f"layers.{li}.attn.wq", lp.wq
        yield f"layers.{li}.attn.wk", lp.wk
        yield f"layers.{li}.attn.wv", lp.wv
        yield f"layers.{li}.attn.wo", lp.wo
        yield f"layers.{li}.ffn.w_up", lp.w_up
        yield f"layers.{li}.ffn.w_down", lp.w_down
    yield "out.w", params.w_out


def map_weights(params: ModelParams, fn) -> ModelParams:
    """Apply fn to every weight matrix; LayerNorm and biases pass through."""
    layers = [
        replace(lp, wq=fn(lp.wq), wk=fn(lp.wk), wv=fn(lp.wv), wo=fn(lp.wo),
                w_up=fn(lp.w_up), w_down=fn(lp.w_down))
        for lp in params.layers
    ]
    return replace(
        params,
        tok_emb=fn(params.tok_emb),
        pos_emb=fn(params.pos_emb),
        layers=layers,
        w_out=fn(params.w_out),
    )


def quantize_params(params: ModelParams, spec: QuantSpec) -> ModelParams:
    """Fake-quantize all weight matrices; embeddings included, biases kept."""
    return map_weights(params, lambda w: fake_quantize_matrix(w, spec))


def random_params(hyper: HyperParams, seed: int = 0, scale: float = 0.05) -> ModelParams:
    """Random untrained model, handy as a toy instance for the search."""
    rng = RandomSource(seed)

    def mat(rows, cols, key):
        return scale * rng.substream(*key).standard_normal((rows, cols))

    d, f = hyper.d_model, hyper.d_ff
    layers = []
    for li in range(hyper.layers):
        layers.append(
            LayerParams(
                ln1_g=np.ones(d), ln1_b=np.zeros(d),
                wq=mat(d, d, (li, 0)), wk=mat(d, d, (li, 1)),
                wv=mat(d, d, (li, 2)), wo=mat(d, d, (li, 3)),
                ln2_g=np.ones(d), ln2_b=np.zeros(d),
                w_up=mat(f, d, (li, 4)),
                b_up=scale * rng.substream(li, 5).standard_normal(f),
                w_down=mat(d, f, (li, 6)),
                b_down=scale * rng.substream(li, 7).standard_normal(d),
            )
        )
    params = ModelParams(
        hyper=hyper,
        tok_emb=mat(hyper.vocab, d, (-1, 0)),
        pos_emb=mat(hyper.context, d, (-1, 1)),
        layers=layers,
        lnf_g=np.ones(d),
        lnf_b=np.zeros(d),
        w_out=mat(hyper.vocab, d, (-1, 2)),
    )
    params.validate()
    return params


# --- container schema -------------------------------------------------------

_META_FIELDS = ("layers", "d_model", "d_ff", "vocab", "heads", "context")


def _named_tensors(params: ModelParams):
    """All tensors in canonical file order: (name, array, is_weight)."""
    yield "embed.tok", params.tok_emb, True
    yield "embed.pos", params.pos_emb, True
    for li, lp in enumerate(params.layers, start=1):
        p = f"layers.{li}"
        yield f"{p}.ln1.g", lp.ln1_g, False
        yield f"{p}.ln1.b", lp.ln1_b, False
        yield f"{p}.attn.wq", lp.wq, True
        yield f"{p}.attn.wk", lp.wk, True
        yield f"{p}.attn.wv", lp.wv, True
        yield f"{p}.attn.wo", lp.wo, True
        yield f"{p}.ln2.g", lp.ln2_g, False
        yield f"{p}.ln2.b", lp.ln2_b, False
        yield f"{p}.ffn.w_up", lp.w_up, True
        yield f"{p}.ffn.b_up", lp.b_up, False
        yield f"{p}.ffn.w_down", lp.w_down, True
        yield f"{p}.ffn.b_down", lp.b_down, False
    yield "final_ln.g", params.lnf_g, False
    yield "final_ln.b", params.lnf_b, False
    yield "out.w", params.w_out, True


def to_checkpoint(params: ModelParams, quant: QuantSpec | None = None) -> cio.Checkpoint:
    """Serialize; with ``quant``, weight matrices become codes/scales/zeros."""
    h = params.hyper
    meta = {k: getattr(h, k) for k in _META_FIELDS}
    meta["kind"] = "model"
    meta["quant"] = None if quant is None else {"bits": quant.bits, "group_size": quant.group_size}
    tensors: list[cio.TensorRecord] = []
    for name, arr, is_weight in _named_tensors(params):
        if quant is not None and is_weight:
            qm = quantize_matrix(arr, quant)
            tensors.append(cio.TensorRecord(f"{name}.codes", qm.codes, "packed", quant.bits))
            tensors.append(cio.TensorRecord(f"{name}.scales", qm.scales, "f16"))
            tensors.append(cio.TensorRecord(f"{name}.zeros", qm.zero_points, "packed", quant.bits))
        else:
            tensors.append(cio.TensorRecord(name, arr, "f32"))
    return cio.Checkpoint(tensors=tensors, meta=meta)


def _load_matrix(ckpt: cio.Checkpoint, name: str, quant: QuantSpec | None) -> np.ndarray:
    if quant is not None and f"{name}.codes" in ckpt:
        codes = ckpt.get(f"{name}.codes").data
        scales = ckpt.get(f"{name}.scales").data.astype(np.float64)
        # degenerate groups store a sub-f16 scale that flushes to 0 on disk;
        # their codes all equal the zero point, so any positive floor is exact
        scales = np.maximum(scales, SCALE_FLOOR)
        zeros = ckpt.get(f"{name}.zeros").data
        qm = QuantizedMatrix(quant, codes, scales, zeros, codes.shape)
        return dequantize_matrix(qm)
    return ckpt.get(name).data.astype(np.float64)


def from_checkpoint(ckpt: cio.Checkpoint) -> ModelParams:
    """Rebuild float64 params, dequantizing weight records when present."""
    meta = ckpt.meta
    if meta.get("kind") != "model":
        raise FormatError("container does not hold a model checkpoint")
    missing = [k for k in _META_FIELDS if k not in meta]
    if missing:
        raise FormatError(f"model metadata missing fields: {missing}")
    h = HyperParams(**{k: int(meta[k]) for k in _META_FIELDS})
    q = meta.get("quant")
    quant = None if q is None else QuantSpec(int(q["bits"]), int(q["group_size"]))

    def vec(name):
        return ckpt.get(name).data.astype(np.float64)

    try:
        layers = []
        for li in range(1, h.layers + 1):
            p = f"layers.{li}"
            layers.append(
                LayerParams(
                    ln1_g=vec(f"{p}.ln1.g"), ln1_b=vec(f"{p}.ln1.b"),
                    wq=_load_matrix(ckpt, f"{p}.attn.wq", quant),
                    wk=_load_matrix(ckpt, f"{p}.attn.wk", quant),
                    wv=_load_matrix(ckpt, f"{p}.attn.wv", quant),
                    wo=_load_matrix(ckpt, f"{p}.attn.wo", quant),
                    ln2_g=vec(f"{p}.ln2.g"), ln2_b=vec(f"{p}.ln2.b"),
                    w_up=_load_matrix(ckpt, f"{p}.ffn.w_up", quant),
                    b_up=vec(f"{p}.ffn.b_up"),
                    w_down=_load_matrix(ckpt, f"{p}.ffn.w_down", quant),
                    b_down=vec(f"{p}.ffn.b_down"),
                )
            )
        params = ModelParams(
            hyper=h,
            tok_emb=_load_matrix(ckpt, "embed.tok", quant),
            pos_emb=_load_matrix(ckpt, "embed.pos", quant),
            layers=layers,
            lnf_g=vec("final_ln.g"),
            lnf_b=vec("final_ln.b"),
            w_out=_load_matrix(ckpt, "out.w", quant),
        )
    except KeyError as e:
        raise FormatError(f"model checkpoint missing tensor {e}") from e
    params.validate()
    return params
