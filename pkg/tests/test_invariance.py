import numpy as np
import pytest

import ivq
from ivq.errors import DomainError
from ivq.invariance import (
    LayerTransform,
    apply_permutation,
    apply_rotation,
    apply_scaling,
    apply_transformation,
    identity_transform,
    rotation_deviation,
    transform_records,
    transforms_from_checkpoint,
)
from ivq.model import ffn_block

from conftest import TOY_HYPER


def _ffn_triplet(rng, d_ff=8, d=5):
    return rng.normal(size=(d_ff, d)), rng.normal(size=d_ff), rng.normal(size=(d, d_ff))


def _rel_diff(a, b):
    return np.max(np.abs(a - b)) / np.max(np.abs(a))


def test_permutation_identity():
    rng = np.random.default_rng(0)
    w_up, b_up, w_down = _ffn_triplet(rng)
    out = apply_permutation(w_up, b_up, w_down, np.arange(8))
    for got, want in zip(out, (w_up, b_up, w_down)):
        assert np.array_equal(got, want)


def test_permutation_swaps_rows():
    w_up = np.array([[1.0, 2.0], [3.0, 4.0]])
    b_up = np.array([10.0, 20.0])
    w_down = np.array([[5.0, 6.0]])
    up2, b2, down2 = apply_permutation(w_up, b_up, w_down, np.array([1, 0]))
    assert np.array_equal(up2, w_up[::-1])
    assert np.array_equal(b2, b_up[::-1])
    assert np.array_equal(down2, w_down[:, ::-1])


def test_permutation_preserves_ffn_output():
    rng = np.random.default_rng(1)
    w_up, b_up, w_down = _ffn_triplet(rng)
    x = rng.normal(size=(6, 5))
    base = ffn_block(x, w_up, b_up, w_down, np.zeros(5))
    up2, b2, down2 = apply_permutation(w_up, b_up, w_down, rng.permutation(8))
    assert _rel_diff(base, ffn_block(x, up2, b2, down2, np.zeros(5))) <= 1e-10


def test_permutation_rejects_invalid():
    rng = np.random.default_rng(2)
    w_up, b_up, w_down = _ffn_triplet(rng)
    with pytest.raises(DomainError):
        apply_permutation(w_up, b_up, w_down, np.array([0, 0, 1, 2, 3, 4, 5, 6]))


def test_scaling_identity_and_factor_two():
    rng = np.random.default_rng(3)
    w_up, b_up, w_down = _ffn_triplet(rng)
    out = apply_scaling(w_up, b_up, w_down, np.ones(8))
    assert all(np.array_equal(g, w) for g, w in zip(out, (w_up, b_up, w_down)))
    up2, b2, down2 = apply_scaling(w_up, b_up, w_down, np.full(8, 2.0))
    assert np.array_equal(up2, 2 * w_up)
    assert np.array_equal(down2, w_down / 2)
    # product unchanged when every hidden pre-activation is nonnegative
    x = np.abs(rng.normal(size=(4, 5)))
    w_up_pos, b_up_pos = np.abs(w_up), np.abs(b_up)
    base = ffn_block(x, w_up_pos, b_up_pos, w_down, np.zeros(5))
    scaled = ffn_block(x, 2 * w_up_pos, 2 * b_up_pos, w_down / 2, np.zeros(5))
    assert _rel_diff(base, scaled) <= 1e-12


def test_scaling_preserves_ffn_output():
    rng = np.random.default_rng(4)
    w_up, b_up, w_down = _ffn_triplet(rng)
    x = rng.normal(size=(6, 5))
    base = ffn_block(x, w_up, b_up, w_down, np.zeros(5))
    s = rng.uniform(0.5, 2.0, 8)
    up2, b2, down2 = apply_scaling(w_up, b_up, w_down, s)
    assert _rel_diff(base, ffn_block(x, up2, b2, down2, np.zeros(5))) <= 1e-10


def test_scaling_rejects_nonpositive():
    rng = np.random.default_rng(5)
    w_up, b_up, w_down = _ffn_triplet(rng)
    s = np.ones(8)
    s[3] = -0.5
    with pytest.raises(DomainError):
        apply_scaling(w_up, b_up, w_down, s)
    s[3] = 0.0
    with pytest.raises(DomainError):
        apply_scaling(w_up, b_up, w_down, s)


def test_rotation_zero_is_exact_identity():
    rng = np.random.default_rng(6)
    w_up, b_up, w_down = _ffn_triplet(rng)
    out = apply_rotation(w_up, b_up, w_down, np.zeros(4))
    for got, want in zip(out, (w_up, b_up, w_down)):
        assert np.array_equal(got, want)


def test_rotation_quarter_turn_maps_rows():
    # phi = pi/2 sends the row pair (r1, r2) to (-r2, r1)
    w_up = np.array([[1.0, 2.0], [3.0, 4.0]])
    b_up = np.array([1.0, 2.0])
    w_down = np.array([[7.0, 8.0]])
    up2, b2, down2 = apply_rotation(w_up, b_up, w_down, np.array([np.pi / 2]))
    assert np.allclose(up2, np.array([[-3.0, -4.0], [1.0, 2.0]]), atol=1e-15)
    assert np.allclose(b2, np.array([-2.0, 1.0]), atol=1e-15)
    # columns of W_down rotate with the same coefficients
    assert np.allclose(down2, np.array([[-8.0, 7.0]]), atol=1e-15)


def test_rotation_inverse_restores():
    rng = np.random.default_rng(7)
    w_up, b_up, w_down = _ffn_triplet(rng)
    phi = rng.normal(0, 0.7, 4)
    mid = apply_rotation(w_up, b_up, w_down, phi)
    back = apply_rotation(*mid, -phi)
    for got, want in zip(back, (w_up, b_up, w_down)):
        assert np.max(np.abs(got - want)) < 1e-12


def test_apply_transformation_identity(toy_params):
    t = identity_transform(TOY_HYPER.d_ff)
    out = apply_transformation(toy_params, 1, t)
    assert np.array_equal(out.layers[0].w_up, toy_params.layers[0].w_up)
    assert np.array_equal(out.layers[0].w_down, toy_params.layers[0].w_down)
    assert out.layers[1] is toy_params.layers[1]  # untouched layers shared


def test_apply_transformation_matches_sequential(toy_params):
    rng = np.random.default_rng(8)
    d_ff = TOY_HYPER.d_ff
    t = LayerTransform(rng.permutation(d_ff), rng.uniform(0.5, 2, d_ff), rng.normal(0, 0.2, d_ff // 2))
    combined = apply_transformation(toy_params, 2, t)
    lp = toy_params.layers[1]
    seq = apply_rotation(lp.w_up, lp.b_up, lp.w_down, t.phi)
    seq = apply_scaling(*seq, t.s)
    seq = apply_permutation(*seq, t.pi)
    assert np.max(np.abs(combined.layers[1].w_up - seq[0])) < 1e-12
    assert np.max(np.abs(combined.layers[1].b_up - seq[1])) < 1e-12
    assert np.max(np.abs(combined.layers[1].w_down - seq[2])) < 1e-12


def test_transformation_preserves_logits_without_rotation(toy_params, toy_calib):
    rng = np.random.default_rng(9)
    d_ff = TOY_HYPER.d_ff
    base, _ = ivq.forward(toy_params, toy_calib)
    t = LayerTransform(rng.permutation(d_ff), rng.uniform(0.5, 2, d_ff), np.zeros(d_ff // 2))
    out, _ = ivq.forward(apply_transformation(toy_params, 1, t), toy_calib)
    assert _rel_diff(base, out) <= 1e-8


def test_transformation_roundtrip_inverse(toy_params):
    rng = np.random.default_rng(10)
    d_ff = TOY_HYPER.d_ff
    t = LayerTransform(rng.permutation(d_ff), rng.uniform(0.5, 2, d_ff), rng.normal(0, 0.4, d_ff // 2))
    there = apply_transformation(toy_params, 1, t)
    back = apply_transformation(there, 1, t, inverse=True)
    for name in ("w_up", "b_up", "w_down"):
        a = getattr(back.layers[0], name)
        b = getattr(toy_params.layers[0], name)
        assert np.max(np.abs(a - b)) < 1e-10


def test_rotation_nonzero_changes_outputs(toy_params, toy_calib):
    # the non-invariance witness: half-radian rotations visibly move logits
    d_ff = TOY_HYPER.d_ff
    t = identity_transform(d_ff)
    t.phi = np.full(d_ff // 2, 0.5)
    base, _ = ivq.forward(toy_params, toy_calib)
    out, _ = ivq.forward(apply_transformation(toy_params, 1, t), toy_calib)
    assert _rel_diff(base, out) > 1e-3


def test_rotation_deviation_zero_and_small(toy_params, toy_calib):
    d_ff = TOY_HYPER.d_ff
    assert rotation_deviation(toy_params, 1, np.zeros(d_ff // 2), toy_calib) == 0.0
    dev = rotation_deviation(toy_params, 1, np.full(d_ff // 2, 1e-3), toy_calib)
    assert dev <= 1e-3


def test_rotation_deviation_grows_with_angle(toy_params, toy_calib):
    d_ff = TOY_HYPER.d_ff
    rng = np.random.default_rng(11)
    phi = rng.normal(0, 1.0, d_ff // 2)
    devs = [rotation_deviation(toy_params, 1, c * phi, toy_calib) for c in (1e-4, 2e-4, 4e-4)]
    assert devs[0] <= devs[1] <= devs[2]


def test_quantized_outputs_differ_under_transform(toy_params, toy_calib):
    rng = np.random.default_rng(12)
    d_ff = TOY_HYPER.d_ff
    spec = ivq.QuantSpec(2, 16)
    t = LayerTransform(rng.permutation(d_ff), rng.uniform(0.5, 2, d_ff), np.zeros(d_ff // 2))
    q_base = ivq.quantize_params(toy_params, spec)
    q_trans = ivq.quantize_params(apply_transformation(toy_params, 1, t), spec)
    a, _ = ivq.forward(q_base, toy_calib)
    b, _ = ivq.forward(q_trans, toy_calib)
    assert not np.allclose(a, b)


def test_transform_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(13)
    transforms = [
        LayerTransform(rng.permutation(16), rng.uniform(0.5, 2, 16), rng.normal(0, 0.1, 8).astype(np.float32).astype(np.float64))
        for _ in range(2)
    ]
    transforms[0].s = transforms[0].s.astype(np.float32).astype(np.float64)
    transforms[1].s = transforms[1].s.astype(np.float32).astype(np.float64)
    ckpt = ivq.Checkpoint(tensors=transform_records(transforms), meta={"kind": "transforms"})
    path = tmp_path / "t.ivq"
    ivq.write_checkpoint(path, ckpt)
    back = transforms_from_checkpoint(ivq.read_checkpoint(path), 2)
    for got, want in zip(back, transforms):
        assert np.array_equal(got.pi, want.pi)
        assert np.array_equal(got.s, want.s)
        assert np.array_equal(got.phi, want.phi)


def test_layer_transform_validation():
    with pytest.raises(DomainError):
        LayerTransform(np.array([0, 0]), np.ones(2), np.zeros(1)).validate()
    with pytest.raises(DomainError):
        LayerTransform(np.arange(2), np.array([1.0, -1.0]), np.zeros(1)).validate()
    with pytest.raises(DomainError):
        LayerTransform(np.arange(2), np.ones(2), np.array([np.inf])).validate()
