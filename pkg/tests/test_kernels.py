import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import aggregate_loop, candidate_loop, dense_project_loop

from voxnt.errors import ShapeMismatchError, VoxelFormatError
from voxnt.grid import VoxelGrid
from voxnt.kernels import (
    AttentionWeights,
    FeatureVolume,
    GroupNorm,
    aggregate_layers,
    candidate_coordinates,
    dense_project,
    gather_boundary_candidates,
    instance_aggregate,
    load_attention_weights,
    read_weights,
    save_attention_weights,
    write_weights,
)
from voxnt.offsets import compute_offsets


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.abs(b), 1.0))


@pytest.mark.parametrize("plane, axis", [("XY", 2), ("XZ", 1), ("YZ", 0)])
def test_uniform_eta_gives_mean(rng, plane, axis):
    vol = rng.normal(size=(4, 3, 5, 2))
    out = dense_project(FeatureVolume(vol), np.zeros((4, 3, 5, 3)), plane)
    assert rel_err(out, vol.mean(axis=axis)) <= 1e-12


def test_dominant_logit_selects_slice(rng):
    vol = rng.normal(size=(3, 3, 4, 2))
    eta = np.zeros((3, 3, 4, 3))
    eta[:, :, 2, 0] = 1000.0
    assert np.allclose(dense_project(FeatureVolume(vol), eta, "XY"), vol[:, :, 2], rtol=0, atol=1e-12)


@pytest.mark.parametrize("plane", ["XY", "XZ", "YZ"])
def test_dense_project_matches_loop(rng, plane):
    vol = rng.normal(size=(4, 4, 3, 3))
    eta = rng.normal(size=(4, 4, 3, 3)) * 3
    assert rel_err(dense_project(FeatureVolume(vol), eta, plane), dense_project_loop(vol, eta, plane)) <= 1e-12


@given(st.integers(0, 2**32), st.floats(-50, 50))
def test_projection_shift_invariant(seed, shift):
    r = np.random.default_rng(seed)
    vol = FeatureVolume(r.normal(size=(3, 2, 4, 2)))
    eta = r.normal(size=(3, 2, 4, 3))
    for plane in ("XY", "XZ", "YZ"):
        assert np.allclose(dense_project(vol, eta, plane), dense_project(vol, eta + shift, plane), rtol=1e-9, atol=1e-12)


def test_projection_rejects_bad_input():
    vol = FeatureVolume(np.zeros((2, 2, 2, 1)))
    with pytest.raises(ShapeMismatchError):
        dense_project(vol, np.zeros((2, 2, 3, 3)), "XY")
    with pytest.raises(ValueError):
        dense_project(vol, np.zeros((2, 2, 2, 3)), "XW")
    with pytest.raises(ValueError):
        FeatureVolume(np.full((1, 1, 1, 1), np.nan))


def test_candidates_alpha_zero_is_origin():
    assert gather_boundary_candidates((2, 1, 0), [5, 3, 2, 2, 1, 1], 0.0, (8, 3, 1)) == ((2, 1, 0),) * 6


def test_candidates_unit_offsets_are_origin():
    assert set(gather_boundary_candidates((3, 3, 3), [1] * 6, 1.0, (8, 8, 8))) == {(3, 3, 3)}


def test_candidates_reach_run_end():
    labels = np.zeros((8, 1, 1), dtype=np.uint16)
    labels[2:6] = 1
    f = compute_offsets(labels)
    assert f.values[2, 0, 0, 0] == 4
    assert gather_boundary_candidates((2, 0, 0), f.values[2, 0, 0], 1.0, (8, 1, 1))[0] == (5, 0, 0)
    assert labels[5, 0, 0] == labels[2, 0, 0]
    assert gather_boundary_candidates((2, 0, 0), f.values[2, 0, 0], 2.0, (8, 1, 1))[0] == (7, 0, 0)


def test_candidates_exclusive_step():
    assert gather_boundary_candidates((0, 0, 0), [2, 1, 1, 1, 1, 1], 1.0, (4, 1, 1), inclusive=False)[0] == (2, 0, 0)


def test_candidates_origin_bounds():
    with pytest.raises(IndexError):
        gather_boundary_candidates((4, 0, 0), [1] * 6, 1.0, (4, 1, 1))


@given(st.integers(0, 2**32), st.sampled_from([0.0, 0.5, 1.0, 1.5, 2.0, 3.7]))
def test_candidates_vectorised_matches_loop(seed, alpha):
    r = np.random.default_rng(seed)
    labels = r.integers(0, 3, tuple(r.integers(1, 7, 3))).astype(np.uint16)
    off = compute_offsets(labels).values
    coords = candidate_coordinates(off, alpha)
    for ijk in np.ndindex(labels.shape):
        expected = candidate_loop(ijk, off[ijk].tolist(), alpha, labels.shape)
        assert [tuple(c) for c in coords[ijk].tolist()] == expected
        assert list(gather_boundary_candidates(ijk, off[ijk], alpha, labels.shape)) == expected


@given(st.integers(0, 2**32))
def test_alpha_one_stays_in_instance(seed):
    r = np.random.default_rng(seed)
    labels = r.integers(0, 3, tuple(r.integers(1, 8, 3))).astype(np.uint16)
    coords = candidate_coordinates(compute_offsets(labels).values, 1.0)
    picked = labels[coords[..., 0], coords[..., 1], coords[..., 2]]
    assert (picked == labels[..., None]).all()


def test_zero_query_key_gives_uniform_attention(rng):
    c = 4
    vol = FeatureVolume(rng.normal(size=(3, 3, 2, c)))
    off = compute_offsets(rng.integers(0, 2, (3, 3, 2)))
    w = AttentionWeights(np.zeros((c, c)), np.zeros((c, c)), rng.normal(size=(c, c)))
    _, attn = instance_aggregate(vol, off, w, norm=GroupNorm(2), return_attention=True)
    assert np.allclose(attn, 1 / 6, rtol=0, atol=1e-15)


def test_identical_candidates_reduce_to_residual(rng):
    c = 4
    v = rng.normal(size=c)
    vol = FeatureVolume(np.broadcast_to(v, (2, 2, 2, c)).copy())
    off = compute_offsets(np.zeros((2, 2, 2), dtype=np.uint16))
    w = AttentionWeights.random(c, rng)
    out = instance_aggregate(vol, off, w, norm=GroupNorm(2), inclusive=False)
    expected_pre = w.wv @ v + v
    # every voxel carries the same pre-norm vector; group norm over identical
    # voxels normalizes within the group's channels only
    pre = np.broadcast_to(expected_pre, (2, 2, 2, c))
    assert np.allclose(out.values, GroupNorm(2)(pre), rtol=0, atol=1e-12)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0])
@pytest.mark.parametrize("groups", [1, 2, 4])
def test_aggregate_matches_loop(rng, alpha, groups):
    c = 4
    labels = rng.integers(0, 3, (4, 4, 3)).astype(np.uint16)
    off = compute_offsets(VoxelGrid(labels)).values
    vol = rng.normal(size=(4, 4, 3, c))
    w = AttentionWeights.random(c, rng, 0.7)
    out, attn = instance_aggregate(FeatureVolume(vol), off, w, alpha, GroupNorm(groups), return_attention=True)
    ref_out, ref_attn = aggregate_loop(vol, off, w.wq, w.wk, w.wv, alpha, groups)
    assert rel_err(out.values, ref_out) <= 1e-10
    assert rel_err(attn, ref_attn) <= 1e-10
    assert np.abs(attn.sum(axis=-1) - 1).max() <= 1e-9


def test_aggregate_shape_checks(rng):
    vol = FeatureVolume(np.zeros((2, 2, 2, 4)))
    with pytest.raises(ShapeMismatchError):
        instance_aggregate(vol, np.ones((2, 2, 1, 6)), AttentionWeights.random(4, rng), norm=GroupNorm(2))
    with pytest.raises(ShapeMismatchError):
        instance_aggregate(vol, np.ones((2, 2, 2, 6)), AttentionWeights.random(2, rng), norm=GroupNorm(2))
    with pytest.raises(ValueError):
        instance_aggregate(vol, np.ones((2, 2, 2, 6)), AttentionWeights.random(4, rng))  # 4 % 8


def test_group_norm_default_and_affine(rng):
    x = rng.normal(3.0, 2.0, (3, 3, 3, 16))
    y = GroupNorm()(x)
    g = y.reshape(-1, 8, 2)
    assert np.allclose(g.mean(axis=(0, 2)), 0, atol=1e-12)
    assert np.allclose(g.var(axis=(0, 2)), 1, atol=1e-4)
    gamma, beta = rng.normal(size=16), rng.normal(size=16)
    assert np.allclose(GroupNorm(gamma=gamma, beta=beta)(x), y * gamma + beta)


def test_four_layers_deterministic(rng):
    c = 8
    labels = rng.integers(0, 4, (5, 4, 3)).astype(np.uint16)
    off = compute_offsets(labels)
    vol = FeatureVolume(rng.normal(size=(5, 4, 3, c)))
    layers = [AttentionWeights.random(c, rng, 0.5) for _ in range(4)]
    a = aggregate_layers(vol, off, layers)
    b = aggregate_layers(vol, off, layers)
    assert a.values.tobytes() == b.values.tobytes()
    assert np.isfinite(a.values).all()


def test_weights_round_trip(tmp_path, rng):
    w = AttentionWeights.random(4, rng)
    path = tmp_path / "w.vxw"
    save_attention_weights(w, path)
    assert path.read_bytes()[:4] == b"VXW1"
    back = load_attention_weights(path)
    for name in ("wq", "wk", "wv"):
        assert getattr(back, name).tobytes() == getattr(w, name).tobytes()
    assert back.d_k == 4.0


def test_weights_file_errors(tmp_path):
    path = tmp_path / "w.vxw"
    write_weights(np.zeros((2, 3)), path)
    assert read_weights(path).shape == (2, 3)
    with pytest.raises(VoxelFormatError):
        load_attention_weights(path)
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(VoxelFormatError, match="expected 48"):
        read_weights(path)
    path.write_bytes(b"XXXX" + bytes(8))
    with pytest.raises(VoxelFormatError, match="magic"):
        read_weights(path)
