"""Invariant transformations of a feed-forward pair.

A transform is stored compactly as a permutation vector pi, a positive
scale vector s, and a rotation-angle vector phi (one angle per adjacent
dimension pair (2i, 2i+1)).  Applied to a layer it materializes

    W_up'   = P S R W_up        b_up' = P S R b_up
    W_down' = W_down R^T S^-1 P^T

realized as rotation, then scaling, then permutation.  Permutation and
scaling leave the un-quantized ReLU network's function unchanged;
rotation is only an approximate invariance, which rotation_deviation
measures directly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import checkpoint as cio
from .errors import DomainError
from .model import ModelParams, corpus_cross_entropy, replace_layer
from .numerics import Matrix


@dataclass
class LayerTransform:
    pi: np.ndarray
    s: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=np.int64)
        self.s = np.asarray(self.s, dtype=np.float64)
        self.phi = np.asarray(self.phi, dtype=np.float64)

    def validate(self) -> None:
        d = self.pi.size
        if not np.array_equal(np.sort(self.pi), np.arange(d)):
            raise DomainError("pi is not a permutation of 0..d_ff-1")
        if self.s.shape != (d,):
            raise DomainError("scale vector length mismatch")
        if np.any(self.s <= 0):
            raise DomainError("scale entries must be positive")
        if self.phi.shape != (d // 2,):
            raise DomainError("phi must have length d_ff/2")
        if not np.isfinite(self.phi).all():
            raise DomainError("phi entries must be finite")

    def is_identity(self) -> bool:
        return (
            np.array_equal(self.pi, np.arange(self.pi.size))
            and np.all(self.s == 1.0)
            and np.all(self.phi == 0.0)
        )

    def copy(self) -> "LayerTransform":
        return LayerTransform(self.pi.copy(), self.s.copy(), self.phi.copy())


def identity_transform(d_ff: int) -> LayerTransform:
    if d_ff % 2 != 0:
        raise DomainError("d_ff must be even")
    return LayerTransform(np.arange(d_ff), np.ones(d_ff), np.zeros(d_ff // 2))


def _check_perm(pi: np.ndarray, d_ff: int) -> np.ndarray:
    pi = np.asarray(pi, dtype=np.int64)
    if pi.shape != (d_ff,) or not np.array_equal(np.sort(pi), np.arange(d_ff)):
        raise DomainError("invalid permutation vector")
    return pi


def apply_permutation(W_up: Matrix, b_up, W_down: Matrix, pi):
    """Row i of the result is row pi(i) of the input; index gather only."""
    pi = _check_perm(pi, W_up.shape[0])
    return W_up[pi], np.asarray(b_up)[pi], W_down[:, pi]


def apply_scaling(W_up: Matrix, b_up, W_down: Matrix, s):
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise DomainError("scale entries must be positive")
    if s.shape != (W_up.shape[0],):
        raise DomainError("scale vector length mismatch")
    return W_up * s[:, None], np.asarray(b_up) * s, W_down / s[None, :]


def _rotate_pairs(rows: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Rotate adjacent row pairs (2i, 2i+1) by phi_i; rows indexed on axis 0."""
    c = np.cos(phi)[:, None]
    s = np.sin(phi)[:, None]
    a, b = rows[0::2], rows[1::2]
    out = np.empty_like(rows)
    out[0::2] = c * a - s * b
    out[1::2] = s * a + c * b
    return out


def apply_rotation(W_up: Matrix, b_up, W_down: Matrix, phi):
    phi = np.asarray(phi, dtype=np.float64)
    d_ff = W_up.shape[0]
    if phi.shape != (d_ff // 2,):
        raise DomainError("phi must have length d_ff/2")
    W_up2 = _rotate_pairs(W_up, phi)
    b_up2 = _rotate_pairs(np.asarray(b_up, dtype=np.float64)[:, None], phi)[:, 0]
    # W_down R^T rotates column pairs with the same coefficients
    W_down2 = _rotate_pairs(W_down.T, phi).T
    return W_up2, b_up2, W_down2


def apply_transformation(
    params: ModelParams, layer: int, t: LayerTransform, inverse: bool = False
) -> ModelParams:
    """New params with one layer's FFN pair transformed; others shared.

    With ``inverse`` the exact inverse sequence is applied (undo
    permutation, then scaling, then rotation), restoring parameters
    previously transformed by ``t``.
    """
    t.validate()
    if not 1 <= layer <= params.hyper.layers:
        raise DomainError(f"layer {layer} out of range")
    lp = params.layers[layer - 1]
    w_up, b_up, w_down = lp.w_up, lp.b_up, lp.w_down
    if inverse:
        inv_pi = np.argsort(t.pi)
        w_up, b_up, w_down = apply_permutation(w_up, b_up, w_down, inv_pi)
        w_up, b_up, w_down = apply_scaling(w_up, b_up, w_down, 1.0 / t.s)
        w_up, b_up, w_down = apply_rotation(w_up, b_up, w_down, -t.phi)
    else:
        w_up, b_up, w_down = apply_rotation(w_up, b_up, w_down, t.phi)
        w_up, b_up, w_down = apply_scaling(w_up, b_up, w_down, t.s)
        w_up, b_up, w_down = apply_permutation(w_up, b_up, w_down, t.pi)
    return replace_layer(params, layer, replace(lp, w_up=w_up, b_up=b_up, w_down=w_down))


def rotation_deviation(params: ModelParams, layer: int, phi, calib) -> float:
    """Relative cross-entropy change of the un-quantized model under a
    rotation alone; diagnostic bound on acceptable rotation step sizes."""
    d_ff = params.hyper.d_ff
    t = identity_transform(d_ff)
    t.phi = np.asarray(phi, dtype=np.float64)
    base = corpus_cross_entropy(params, calib)
    rotated = corpus_cross_entropy(apply_transformation(params, layer, t), calib)
    return abs(rotated - base) / abs(base)


# --- checkpoint serialization ------------------------------------------------


def transform_records(transforms: list[LayerTransform]) -> list[cio.TensorRecord]:
    """Per-layer pi/s/phi tensors, appended alongside a model checkpoint."""
    recs = []
    for li, t in enumerate(transforms, start=1):
        recs.append(cio.TensorRecord(f"transform.{li}.pi", t.pi.astype(np.float32), "f32"))
        recs.append(cio.TensorRecord(f"transform.{li}.s", t.s.astype(np.float32), "f32"))
        recs.append(cio.TensorRecord(f"transform.{li}.phi", t.phi.astype(np.float32), "f32"))
    return recs


def transforms_from_checkpoint(ckpt: cio.Checkpoint, layers: int) -> list[LayerTransform]:
    out = []
    for li in range(1, layers + 1):
        t = LayerTransform(
            pi=ckpt.get(f"transform.{li}.pi").data.astype(np.int64),
            s=ckpt.get(f"transform.{li}.s").data.astype(np.float64),
            phi=ckpt.get(f"transform.{li}.phi").data.astype(np.float64),
        )
        t.validate()
        out.append(t)
    return out
