"""Binary container for model checkpoints and quantized artifacts.

Layout (all integers little-endian):

    file     := magic "IVQ1" | version u32 | tensor_count u32
                | tensor_record * tensor_count | metadata
    record   := name_len u32 | name (UTF-8) | rank u32 | dims u32[rank]
                | dtype u32 | bits u32 | payload_len u64 | payload
    metadata := meta_len u32 | canonical JSON (UTF-8, sorted keys)

dtype tags: 0 = f32, 1 = f16, 2 = packed integer codes.  f32/f16 payloads
are little-endian IEEE floats in row-major order.  Packed payloads store
one unsigned ``bits``-wide code per element in group-major (= row-major
element) order, LSB-first within the byte stream; the final partial byte
is zero-padded.  ``bits`` is 0 for float records.

The byte-exact reference for this format lives in docs/container_format.md.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptionError, FormatError

MAGIC = b"IVQ1"
VERSION = 1

_DTYPE_TAGS = {"f32": 0, "f16": 1, "packed": 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Pack unsigned integer codes LSB-first into a little-endian bit stream."""
    flat = np.ascontiguousarray(codes, dtype=np.int64).ravel()
    if flat.size and (flat.min() < 0 or flat.max() >= (1 << bits)):
        raise FormatError(f"codes do not fit in {bits} bits")
    if flat.size == 0:
        return b""
    bit_rows = (flat[:, None] >> np.arange(bits)) & 1
    return np.packbits(bit_rows.astype(np.uint8).ravel(), bitorder="little").tobytes()


def unpack_codes(buf: bytes, count: int, bits: int) -> np.ndarray:
    """Inverse of pack_codes; validates that padding bits are zero."""
    expected = (count * bits + 7) // 8
    if len(buf) != expected:
        raise CorruptionError(
            f"packed payload is {len(buf)} bytes, expected {expected}"
        )
    raw = np.frombuffer(buf, dtype=np.uint8)
    all_bits = np.unpackbits(raw, bitorder="little")
    used, rest = all_bits[: count * bits], all_bits[count * bits :]
    if rest.any():
        raise CorruptionError("nonzero padding bits in packed payload")
    vals = used.reshape(count, bits).astype(np.int32) << np.arange(bits, dtype=np.int32)
    return vals.sum(axis=1, dtype=np.int32)


@dataclass
class TensorRecord:
    """One named tensor: f32/f16 float data or packed integer codes."""

    name: str
    data: np.ndarray
    dtype: str = "f32"
    bits: int = 0

    def __post_init__(self):
        if self.dtype not in _DTYPE_TAGS:
            raise FormatError(f"unknown dtype {self.dtype!r}")
        if self.dtype == "f32":
            self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        elif self.dtype == "f16":
            self.data = np.ascontiguousarray(self.data, dtype=np.float16)
        else:
            if not 1 <= self.bits <= 8:
                raise FormatError("packed records need 1 <= bits <= 8")
            self.data = np.ascontiguousarray(self.data, dtype=np.int32)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    def payload(self) -> bytes:
        if self.dtype == "f32":
            return self.data.astype("<f4").tobytes()
        if self.dtype == "f16":
            return self.data.astype("<f2").tobytes()
        return pack_codes(self.data, self.bits)


@dataclass
class Checkpoint:
    tensors: list[TensorRecord] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    def names(self) -> list[str]:
        return [t.name for t in self.tensors]

    def get(self, name: str) -> TensorRecord:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(t.name == name for t in self.tensors)

    def validate(self) -> None:
        names = self.names()
        if len(set(names)) != len(names):
            raise FormatError("tensor names must be unique")


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    """Serialize; identical checkpoints produce bit-identical files."""
    ckpt.validate()
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", ckpt.version, len(ckpt.tensors))
    for t in ckpt.tensors:
        name = t.name.encode("utf-8")
        payload = t.payload()
        out += struct.pack("<I", len(name)) + name
        out += struct.pack("<I", len(t.dims))
        out += struct.pack(f"<{len(t.dims)}I", *t.dims)
        out += struct.pack("<II", _DTYPE_TAGS[t.dtype], t.bits)
        out += struct.pack("<Q", len(payload)) + payload
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out += struct.pack("<I", len(meta)) + meta
    with open(path, "wb") as f:
        f.write(bytes(out))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptionError("file truncated")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def _expected_payload_len(dtype: str, dims: tuple[int, ...], bits: int) -> int:
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    if dtype == "f32":
        return 4 * count
    if dtype == "f16":
        return 2 * count
    return (count * bits + 7) // 8


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        buf = f.read()
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise FormatError("bad magic; not an IVQ1 container")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    count = r.u32()
    tensors: list[TensorRecord] = []
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = tuple(r.u32() for _ in range(rank))
        tag = r.u32()
        if tag not in _TAG_DTYPES:
            raise FormatError(f"unknown dtype tag {tag}")
        dtype = _TAG_DTYPES[tag]
        bits = r.u32()
        payload_len = r.u64()
        if payload_len != _expected_payload_len(dtype, dims, bits):
            raise CorruptionError(f"payload length mismatch for tensor {name!r}")
        payload = r.take(payload_len)
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        if dtype == "f32":
            data = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        elif dtype == "f16":
            data = np.frombuffer(payload, dtype="<f2").reshape(dims).astype(np.float16)
        else:
            data = unpack_codes(payload, n, bits).reshape(dims)
        tensors.append(TensorRecord(name, data, dtype, bits))
    meta_raw = r.take(r.u32())
    try:
        meta = json.loads(meta_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptionError(f"metadata is not valid JSON: {e}") from e
    if r.pos != len(buf):
        raise CorruptionError("trailing bytes after metadata")
    ckpt = Checkpoint(tensors=tensors, meta=meta, version=version)
    ckpt.validate()
    return ckpt
