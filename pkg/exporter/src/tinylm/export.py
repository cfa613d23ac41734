"""IVQ1 container writer and token-text emission.

Implements the byte format independently (no shared code with the
consumer): magic "IVQ1", u32 version and tensor count, length-prefixed
tensor records (name, rank, dims, dtype tag, bits, u64 payload length,
payload), then a length-prefixed canonical-JSON metadata record.  All
integers little-endian; only the f32 dtype (tag 0) is emitted here.
"""

from __future__ import annotations

import json
import struct

import numpy as np
import torch

from . import ExportError
from .model import TinyDecoder

MAGIC = b"IVQ1"
VERSION = 1
F32_TAG = 0


def write_container(path, tensors: list[tuple[str, np.ndarray]], meta: dict) -> None:
    names = [n for n, _ in tensors]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise ExportError(f"tensor name collision: {dupes}")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        raw = name.encode("utf-8")
        payload = arr.astype("<f4").tobytes()
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += struct.pack("<II", F32_TAG, 0)
        out += struct.pack("<Q", len(payload)) + payload
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out += struct.pack("<I", len(blob)) + blob
    with open(path, "wb") as f:
        f.write(bytes(out))


def model_tensors(model: TinyDecoder) -> list[tuple[str, np.ndarray]]:
    """Model parameters named per the IVQ1 model schema."""

    def npy(t: torch.Tensor) -> np.ndarray:
        return t.detach().cpu().numpy().astype(np.float32)

    tensors = [
        ("embed.tok", npy(model.tok_emb.weight)),
        ("embed.pos", npy(model.pos_emb.weight)),
    ]
    for li, blk in enumerate(model.blocks, start=1):
        p = f"layers.{li}"
        tensors += [
            (f"{p}.ln1.g", npy(blk.ln1.weight)),
            (f"{p}.ln1.b", npy(blk.ln1.bias)),
            (f"{p}.attn.wq", npy(blk.wq.weight)),
            (f"{p}.attn.wk", npy(blk.wk.weight)),
            (f"{p}.attn.wv", npy(blk.wv.weight)),
            (f"{p}.attn.wo", npy(blk.wo.weight)),
            (f"{p}.ln2.g", npy(blk.ln2.weight)),
            (f"{p}.ln2.b", npy(blk.ln2.bias)),
            (f"{p}.ffn.w_up", npy(blk.up.weight)),
            (f"{p}.ffn.b_up", npy(blk.up.bias)),
            (f"{p}.ffn.w_down", npy(blk.down.weight)),
            (f"{p}.ffn.b_down", npy(blk.down.bias)),
        ]
    tensors += [
        ("final_ln.g", npy(model.ln_f.weight)),
        ("final_ln.b", npy(model.ln_f.bias)),
        ("out.w", npy(model.head.weight)),
    ]
    return tensors


def export_checkpoint(model: TinyDecoder, out_path, d_ff: int, n_heads: int) -> None:
    meta = {
        "kind": "model",
        "layers": len(model.blocks),
        "d_model": model.tok_emb.weight.shape[1],
        "d_ff": d_ff,
        "vocab": model.vocab,
        "heads": n_heads,
        "context": model.context,
        "quant": None,
    }
    write_container(out_path, model_tensors(model), meta)


def write_token_lines(path, ids: np.ndarray, seq_len: int, n_lines: int) -> int:
    """Chop a token stream into fixed-length lines of decimal ids."""
    lines = []
    for i in range(n_lines):
        chunk = ids[i * seq_len : (i + 1) * seq_len]
        if chunk.size < seq_len:
            break
        lines.append(" ".join(str(int(t)) for t in chunk))
    if not lines:
        raise ExportError("token stream shorter than one sequence")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    return len(lines)


def export_reference(model: TinyDecoder, sequences: np.ndarray, out_path) -> np.ndarray:
    """Forward the reference batch in float64 and store f32 logits."""
    model_fp64 = model.double()
    with torch.no_grad():
        logits = model_fp64(torch.from_numpy(sequences.astype(np.int64)))
    logits = logits.numpy().astype(np.float32)
    meta = {
        "kind": "reference",
        "sequences": int(sequences.shape[0]),
        "seq_len": int(sequences.shape[1]),
        "vocab": model.vocab,
    }
    write_container(out_path, [("logits", logits)], meta)
    model.float()
    return logits
