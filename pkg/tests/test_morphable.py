import json

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nnsg.errors import BadMagicError, DimensionError, ParseError, TruncatedFileError, ValidationError
from nnsg.morphable import (
    N_EXP,
    N_ID,
    N_PARAMS,
    N_TEX,
    FusionWeights,
    MorphableBasis,
    ParamVector,
    basis_nbytes,
    fuse_identity,
    inverse_rotation,
    load_basis,
    load_params,
    pose_to_transform,
    reconstruct_shape,
    reconstruct_texture,
    save_basis,
    save_params,
)

from oracles import shape_loop, texture_loop

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def test_param_vector_length_and_split(rng):
    x = rng.normal(size=N_PARAMS)
    p = ParamVector.from_array(x)
    assert N_PARAMS == 239
    assert p.alpha.shape == (80,) and p.beta.shape == (64,) and p.delta.shape == (80,)
    assert p.pose.shape == (6,) and p.gamma.shape == (9,)
    np.testing.assert_array_equal(p.to_array(), x)


def test_param_vector_rejects_bad_input():
    with pytest.raises(DimensionError):
        ParamVector.from_array(np.zeros(238))
    x = np.zeros(N_PARAMS)
    x[3] = np.nan
    with pytest.raises(ValidationError):
        ParamVector.from_array(x)


def test_param_vector_is_read_only(rng):
    p = ParamVector.from_array(rng.normal(size=N_PARAMS))
    with pytest.raises(ValueError):
        p.alpha[0] = 1.0


def test_reconstruct_shape_zero_coefficients(tiny_basis):
    s = reconstruct_shape(tiny_basis, np.zeros(N_ID), np.zeros(N_EXP))
    np.testing.assert_array_equal(s, tiny_basis.mean_shape)


def test_reconstruct_shape_unit_vector_selects_column(tiny_basis):
    e1 = np.zeros(N_ID)
    e1[0] = 1.0
    s = reconstruct_shape(tiny_basis, e1, np.zeros(N_EXP))
    np.testing.assert_allclose(s, tiny_basis.mean_shape + tiny_basis.b_id[:, 0], atol=1e-15)


def test_reconstruct_shape_matches_loop_oracle(tiny_basis, rng):
    assert tiny_basis.n_vertices == 8
    alpha, beta = rng.normal(size=N_ID), rng.normal(size=N_EXP)
    expected = shape_loop(tiny_basis.mean_shape, tiny_basis.b_id, tiny_basis.b_exp, alpha, beta)
    np.testing.assert_allclose(reconstruct_shape(tiny_basis, alpha, beta), expected, rtol=0, atol=1e-9)


def test_reconstruct_shape_dimension_error_names_block(tiny_basis):
    with pytest.raises(DimensionError, match="beta"):
        reconstruct_shape(tiny_basis, np.zeros(N_ID), np.zeros(N_EXP - 1))
    with pytest.raises(DimensionError, match="alpha"):
        reconstruct_shape(tiny_basis, np.zeros(N_ID + 1), np.zeros(N_EXP))


def test_reconstruct_texture_cases(tiny_basis, rng):
    np.testing.assert_array_equal(
        reconstruct_texture(tiny_basis, np.zeros(N_TEX)), np.clip(tiny_basis.mean_texture, 0, 1)
    )
    e3 = np.zeros(N_TEX)
    e3[2] = 1.0
    np.testing.assert_allclose(
        reconstruct_texture(tiny_basis, e3),
        np.clip(tiny_basis.mean_texture + tiny_basis.b_tex[:, 2], 0, 1),
        atol=1e-15,
    )
    delta = rng.normal(size=N_TEX)
    raw = texture_loop(tiny_basis.mean_texture, tiny_basis.b_tex, delta)
    np.testing.assert_allclose(reconstruct_texture(tiny_basis, delta), np.clip(raw, 0, 1), atol=1e-9)
    with pytest.raises(DimensionError):
        reconstruct_texture(tiny_basis, np.zeros(3))


def test_reconstruct_texture_clamps(tiny_basis):
    big = np.full(N_TEX, 1e4)
    t = reconstruct_texture(tiny_basis, big)
    assert t.min() >= 0.0 and t.max() <= 1.0


@settings(max_examples=50, deadline=None)
@given(
    a1=arrays(np.float64, N_ID, elements=finite),
    a2=arrays(np.float64, N_ID, elements=finite),
    beta=arrays(np.float64, N_EXP, elements=finite),
)
def test_shape_is_affine_in_alpha(tiny_basis, a1, a2, beta):
    diff = reconstruct_shape(tiny_basis, a1 + a2, beta) - reconstruct_shape(tiny_basis, a1, beta)
    expected = tiny_basis.b_id @ a2
    bound = 1e-7 * (np.abs(reconstruct_shape(tiny_basis, a1 + a2, beta)).max() + 1.0)
    np.testing.assert_allclose(diff, expected, rtol=1e-7, atol=bound)


def test_fuse_identity_cases():
    a = np.arange(N_ID, dtype=float)
    b = np.ones(N_ID)
    assert fuse_identity(a, b, FusionWeights(1.0, 0.0)).tobytes() == a.tobytes()
    x, y = np.zeros(N_ID), np.zeros(N_ID)
    x[0], y[1] = 2.0, 2.0
    expected = np.zeros(N_ID)
    expected[:2] = 1.0
    np.testing.assert_array_equal(fuse_identity(x, y, FusionWeights(0.5, 0.5)), expected)


def test_fusion_defaults_are_one_half():
    w = FusionWeights()
    assert (w.lam, w.mu) == (0.5, 0.5)
    x, y = np.full(N_ID, 4.0), np.full(N_ID, 2.0)
    np.testing.assert_array_equal(fuse_identity(x, y), np.full(N_ID, 3.0))


def test_fuse_identity_rejects_non_finite():
    bad = np.zeros(N_ID)
    bad[5] = np.inf
    with pytest.raises(ValidationError):
        fuse_identity(bad, np.zeros(N_ID))
    with pytest.raises(ValidationError):
        FusionWeights(float("nan"), 0.5)


@settings(max_examples=100, deadline=None)
@given(
    a=arrays(np.float64, N_ID, elements=finite),
    b=arrays(np.float64, N_ID, elements=finite),
    c=st.sampled_from([-3.0, -0.5, 0.25, 2.0, 8.0, 0.3]),
)
@example(a=np.full(N_ID, 5e-324), b=np.full(N_ID, -5e-324), c=-3.0)
@example(a=np.full(N_ID, 5.0), b=np.full(N_ID, -5.45478364), c=-3.0)
def test_fusion_is_linear(a, b, c):
    w = FusionWeights(0.5, 0.5)
    lhs, rhs = fuse_identity(c * a, c * b, w), c * fuse_identity(a, b, w)
    if np.log2(abs(c)).is_integer():
        # power-of-two scaling commutes with rounding
        np.testing.assert_array_equal(lhs, rhs)
    else:
        # a few roundings, each bounded relative to the operands (not the result),
        # plus the absolute underflow error of subnormal intermediates
        bound = 4 * np.finfo(float).eps * abs(c) * (np.abs(a) + np.abs(b)) + 8 * 2.0 ** -1074
        assert np.all(np.abs(lhs - rhs) <= bound)


def test_fusion_bisector_small_sample(rng):
    for _ in range(500):
        a, r = rng.normal(size=(2, N_ID))
        a, r = a / np.linalg.norm(a), r / np.linalg.norm(r)
        f = fuse_identity(a, r)
        if np.linalg.norm(f) == 0:
            continue
        cos_f = f @ a / np.linalg.norm(f)
        assert cos_f >= r @ a - 1e-12


def test_pose_identity_and_translation():
    R, t = pose_to_transform([0, 0, 0, 1.5, -2.0, 10.0])
    np.testing.assert_array_equal(R, np.eye(3))
    np.testing.assert_array_equal(t, [1.5, -2.0, 10.0])


def test_pose_yaw_quarter_turn_maps_x_to_minus_z():
    R, _ = pose_to_transform([0, np.pi / 2, 0, 0, 0, 0])
    np.testing.assert_allclose(R @ [1.0, 0.0, 0.0], [0.0, 0.0, -1.0], atol=1e-9)


def test_pose_composition_order():
    pitch, yaw, roll = 0.3, -0.7, 1.1
    R, _ = pose_to_transform([pitch, yaw, roll, 0, 0, 0])
    cz, sz = np.cos(roll), np.sin(roll)
    cy, sy = np.cos(yaw), np.sin(yaw)
    cx, sx = np.cos(pitch), np.sin(pitch)
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    np.testing.assert_allclose(R, Rz @ Ry @ Rx, atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(angles=arrays(np.float64, 3, elements=st.floats(-2 * np.pi, 2 * np.pi)))
def test_rotation_is_special_orthogonal_and_invertible(angles):
    pose = np.concatenate([angles, [0.0, 0.0, 0.0]])
    R, _ = pose_to_transform(pose)
    assert np.abs(R.T @ R - np.eye(3)).max() <= 1e-9
    assert abs(np.linalg.det(R) - 1.0) <= 1e-9
    assert np.abs(R @ inverse_rotation(pose) - np.eye(3)).max() <= 1e-9


def test_params_file_round_trip(tmp_path, rng):
    p = ParamVector.from_array(rng.normal(size=N_PARAMS))
    path = tmp_path / "face.json"
    save_params(p, path, face_id="abc")
    q, face_id = load_params(path)
    assert face_id == "abc"
    assert q.to_array().tobytes() == p.to_array().tobytes()


def test_params_file_rejects_wrong_lengths(tmp_path):
    data = ParamVector.zeros().to_dict()
    data["pose"] = [0.0] * 5
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(data))
    with pytest.raises(ParseError, match="pose"):
        load_params(path)
    del data["pose"]
    path.write_text(json.dumps(data))
    with pytest.raises(ParseError, match="missing"):
        load_params(path)
    path.write_text("{not json")
    with pytest.raises(ParseError):
        load_params(path)


def test_basis_invariants(tiny_basis):
    mean = tiny_basis.mean_shape
    args = [mean, tiny_basis.mean_texture, tiny_basis.b_id, tiny_basis.b_exp, tiny_basis.b_tex]
    with pytest.raises(ValidationError, match="degenerate"):
        MorphableBasis(*args, np.array([[0, 0, 1]]))
    with pytest.raises(ValidationError, match="out of range"):
        MorphableBasis(*args, np.array([[0, 1, 8]]))
    with pytest.raises(DimensionError, match="b_exp"):
        MorphableBasis(mean, tiny_basis.mean_texture, tiny_basis.b_id, tiny_basis.b_exp[:, :10],
                       tiny_basis.b_tex, tiny_basis.triangles)


def test_basis_file_round_trip(tmp_path, tiny_basis):
    path = tmp_path / "basis.bin"
    save_basis(tiny_basis, path)
    raw = path.read_bytes()
    assert raw[:8] == b"NNSGBAS1"
    assert len(raw) == basis_nbytes(8, tiny_basis.n_triangles)
    loaded = load_basis(path)
    for name in ("mean_shape", "mean_texture", "b_id", "b_exp", "b_tex"):
        np.testing.assert_array_equal(getattr(loaded, name), getattr(tiny_basis, name).astype(np.float32))
    np.testing.assert_array_equal(loaded.triangles, tiny_basis.triangles)


def test_basis_file_is_column_major(tmp_path, tiny_basis):
    path = tmp_path / "basis.bin"
    save_basis(tiny_basis, path)
    raw = path.read_bytes()
    rows = 3 * tiny_basis.n_vertices
    offset = 16 + 4 * 2 * rows
    first_col = np.frombuffer(raw, "<f4", count=rows, offset=offset)
    np.testing.assert_array_equal(first_col, tiny_basis.b_id[:, 0].astype(np.float32))


def test_basis_file_validation(tmp_path, tiny_basis):
    path = tmp_path / "basis.bin"
    save_basis(tiny_basis, path)
    raw = path.read_bytes()
    path.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(BadMagicError):
        load_basis(path)
    path.write_bytes(raw[:-4])
    with pytest.raises(TruncatedFileError):
        load_basis(path)
