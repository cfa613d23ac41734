"""Asymmetric integer group quantization.

Weights are grouped along contiguous row-major runs: each matrix row is
split into runs of ``group_size`` elements, with a final shorter run when
the row length is not divisible (no padding).  Every group is quantized
independently with an unsigned code range [0, 2^bits - 1], a real scale
s_g and an integer zero point z_g:

    code     = clamp(round(w / s_g) + z_g, q_min, q_max)
    restored = s_g * (code - z_g)

The fitted range is widened to include 0 (min' = min(min, 0),
max' = max(max, 0)) so that a weight of exactly 0 always maps back to
exactly 0 and constant groups round-trip exactly.  Rounding is
half-away-from-zero, which keeps the code of the group minimum and the
zero point sign-symmetric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .numerics import Matrix

SCALE_FLOOR = 1e-12

_ALLOWED_BITS = (1, 2, 3, 4, 8)


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    group_size: int

    def __post_init__(self):
        if self.bits not in _ALLOWED_BITS:
            raise DomainError(f"bits must be one of {_ALLOWED_BITS}, got {self.bits}")
        if self.group_size < 1:
            raise DomainError("group_size must be positive")

    @property
    def q_min(self) -> int:
        return 0

    @property
    def q_max(self) -> int:
        return 2**self.bits - 1


@dataclass
class QuantizedMatrix:
    """Integer codes plus per-group scale/zero-point for one weight matrix.

    ``codes`` has the original matrix shape; ``scales`` and ``zero_points``
    have shape (rows, groups_per_row) with the tail group last.
    """

    spec: QuantSpec
    codes: np.ndarray
    scales: np.ndarray
    zero_points: np.ndarray
    shape: tuple[int, int]

    def __post_init__(self):
        qmax = self.spec.q_max
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() > qmax):
            raise DomainError("codes out of range")
        if self.scales.size and self.scales.min() <= 0:
            raise DomainError("scales must be positive")
        if self.zero_points.size and (
            self.zero_points.min() < 0 or self.zero_points.max() > qmax
        ):
            raise DomainError("zero points out of range")


def round_half_away(x: np.ndarray) -> np.ndarray:
    # np.round is half-to-even; the quantizer needs sign-symmetric rounding
    return np.floor(np.abs(x) + 0.5) * np.sign(x)


def fit_group_params(group, spec: QuantSpec, strict: bool = False):
    """Closed-form scale and zero point for one group.

    ``strict`` fits the literal min/max range without widening to include
    0; it exists only for differential testing against the widened fit.
    """
    group = np.asarray(group, dtype=np.float64)
    if not np.isfinite(group).all():
        raise DomainError("group contains non-finite values")
    lo = float(group.min())
    hi = float(group.max())
    if not strict:
        lo = min(lo, 0.0)
        hi = max(hi, 0.0)
    s = max((hi - lo) / (spec.q_max - spec.q_min), SCALE_FLOOR)
    z = spec.q_min - lo / s
    z = int(np.clip(round_half_away(np.asarray(z)), spec.q_min, spec.q_max))
    return s, z


def quantize_group(group, s_g: float, z_g: int, spec: QuantSpec) -> np.ndarray:
    if s_g <= 0:
        raise DomainError("scale must be positive")
    group = np.asarray(group, dtype=np.float64)
    codes = round_half_away(group / s_g) + z_g
    return np.clip(codes, spec.q_min, spec.q_max).astype(np.int32)


def dequantize_group(codes, s_g: float, z_g: int) -> np.ndarray:
    codes = np.asarray(codes)
    return s_g * (codes.astype(np.float64) - z_g)


def _row_group_slices(cols: int, group_size: int):
    """(start, stop) pairs for the groups of one row, tail run last."""
    return [(i, min(i + group_size, cols)) for i in range(0, cols, group_size)]


def _fit_blocks(w: np.ndarray, spec: QuantSpec, strict: bool):
    """Vectorized fit over a (rows, n_groups, G) block of equal-size groups."""
    lo = w.min(axis=2)
    hi = w.max(axis=2)
    if not strict:
        lo = np.minimum(lo, 0.0)
        hi = np.maximum(hi, 0.0)
    s = np.maximum((hi - lo) / (spec.q_max - spec.q_min), SCALE_FLOOR)
    z = np.clip(round_half_away(spec.q_min - lo / s), spec.q_min, spec.q_max)
    return s, z.astype(np.int32)


def quantize_matrix(w: Matrix, spec: QuantSpec, strict: bool = False) -> QuantizedMatrix:
    """Quantize a full matrix, per-row groups of ``spec.group_size``."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise DomainError("quantize_matrix expects a 2-D matrix")
    if not np.isfinite(w).all():
        raise DomainError("weights must be finite")
    rows, cols = w.shape
    G = spec.group_size
    full = cols - cols % G
    n_full = full // G
    n_groups = n_full + (1 if cols > full else 0)

    codes = np.empty((rows, cols), dtype=np.int32)
    scales = np.empty((rows, n_groups), dtype=np.float64)
    zeros = np.empty((rows, n_groups), dtype=np.int32)

    if n_full:
        block = w[:, :full].reshape(rows, n_full, G)
        s, z = _fit_blocks(block, spec, strict)
        c = round_half_away(block / s[:, :, None]) + z[:, :, None]
        codes[:, :full] = np.clip(c, spec.q_min, spec.q_max).reshape(rows, full)
        scales[:, :n_full] = s
        zeros[:, :n_full] = z
    if cols > full:
        tail = w[:, full:].reshape(rows, 1, cols - full)
        s, z = _fit_blocks(tail, spec, strict)
        c = round_half_away(tail / s[:, :, None]) + z[:, :, None]
        codes[:, full:] = np.clip(c, spec.q_min, spec.q_max).reshape(rows, cols - full)
        scales[:, n_full:] = s
        zeros[:, n_full:] = z

    return QuantizedMatrix(spec, codes, scales, zeros, (rows, cols))


def dequantize_matrix(qm: QuantizedMatrix) -> Matrix:
    rows, cols = qm.shape
    G = qm.spec.group_size
    out = np.empty((rows, cols), dtype=np.float64)
    for gi, (a, b) in enumerate(_row_group_slices(cols, G)):
        out[:, a:b] = qm.scales[:, gi : gi + 1] * (
            qm.codes[:, a:b].astype(np.float64) - qm.zero_points[:, gi : gi + 1]
        )
    return out


def fake_quantize_matrix(w: Matrix, spec: QuantSpec, strict: bool = False) -> Matrix:
    """Quantize then dequantize, simulating quantized inference in float64."""
    return dequantize_matrix(quantize_matrix(w, spec, strict=strict))
