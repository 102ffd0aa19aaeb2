import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import smooth_field, trilinear_oracle
from recorr.errors import ContractError
from recorr.volume import (Volume, compose, downsample_volume, fold_fraction, identity_grid, jacobian_det,
                           resize, upsample_field, warp)


def test_volume_invariants():
    v = Volume(np.zeros((2, 3, 4, 5)), (1, 2, 3))
    assert v.channels == 2 and v.dims == (3, 4, 5) and v.spacing == (1.0, 2.0, 3.0)
    assert Volume(np.zeros((3, 4, 5))).channels == 1
    with pytest.raises(ContractError):
        Volume(np.full((1, 2, 2, 2), np.nan))
    with pytest.raises(ContractError):
        Volume(np.zeros((1, 2, 2, 2)), (1, 0, 1))
    with pytest.raises(ContractError):
        Volume(np.zeros((1, 0, 2, 2)))


def test_warp_zero_field_is_exact_identity(rng):
    img = rng.normal(size=(2, 5, 6, 7))
    assert np.array_equal(warp(img, np.zeros((3, 5, 6, 7))), img)


def test_warp_ramp_shift():
    x = np.broadcast_to(np.arange(8.0), (8, 8, 8))[None]
    u = np.zeros((3, 8, 8, 8))
    u[2] = 1.0
    out = warp(x, u)
    assert np.array_equal(out[0, :, :, :-1], x[0, :, :, 1:])
    assert np.all(out[0, :, :, -1] == 7.0)  # clamped at the border


def test_warp_border_clamp_half_voxel(rng):
    img = rng.normal(size=(1, 4, 4, 4))
    for axis in range(3):
        u = np.zeros((3, 4, 4, 4))
        u[axis] = -0.5
        out = warp(img, u)
        first = [slice(None)] * 4
        first[axis + 1] = 0
        assert np.allclose(out[tuple(first)], img[tuple(first)], atol=0, rtol=0)


def test_warp_matches_oracle(rng):
    img = rng.normal(size=(2, 5, 4, 6))
    u = rng.uniform(-3, 3, size=(3, 5, 4, 6))
    out = warp(img, u)
    for z, y, x in [(0, 0, 0), (4, 3, 5), (2, 1, 3), (3, 2, 0)]:
        ref = trilinear_oracle(img, z + u[0, z, y, x], y + u[1, z, y, x], x + u[2, z, y, x])
        assert np.allclose(out[:, z, y, x], ref, atol=1e-12)


def test_warp_dimension_mismatch():
    with pytest.raises(ContractError):
        warp(np.zeros((1, 4, 4, 4)), np.zeros((3, 4, 4, 5)))


def test_compose_trivial(rng):
    z = np.zeros((3, 4, 4, 4))
    assert np.array_equal(compose(z, z), z)
    u = rng.normal(size=(3, 4, 4, 4))
    assert np.array_equal(compose(u, z), u)


def test_compose_matches_nested_loop_oracle(rng):
    a, b = smooth_field(rng, (6, 6, 6), 1.5), smooth_field(rng, (6, 6, 6), 1.5)
    out = compose(a, b)
    for z in range(6):
        for y in range(6):
            for x in range(6):
                p = np.array([z, y, x]) + b[:, z, y, x]
                ref = b[:, z, y, x] + trilinear_oracle(a, *p)
                assert np.allclose(out[:, z, y, x], ref, atol=1e-6)


def test_compose_consistent_with_warp(rng):
    # warp(img, compose(a, b)) == warp(warp(img, a), b) up to interpolation error
    dims = (24, 24, 24)
    g = identity_grid(dims)
    img = (g[0] - 0.5 * g[1] + 0.25 * g[2]) / 24.0 + 0.05 * np.sin(g[0] / 9.0) * np.cos(g[2] / 11.0)
    img = img[None]
    a, b = smooth_field(rng, dims, 0.3, 4.0), smooth_field(rng, dims, 0.3, 4.0)
    lhs = warp(img, compose(a, b))
    rhs = warp(warp(img, a), b)
    inner = (slice(None),) + (slice(2, -2),) * 3
    assert np.abs(lhs - rhs)[inner].max() < 1e-4


def test_upsample_field_examples(rng):
    assert np.array_equal(upsample_field(np.zeros((3, 2, 3, 4))), np.zeros((3, 4, 6, 8)))
    u = np.zeros((3, 4, 4, 4))
    u[2] = 1.0
    up = upsample_field(u)
    assert up.shape == (3, 8, 8, 8)
    assert np.allclose(up[0:2], 0) and np.allclose(up[2], 2.0, atol=1e-15)


def test_upsample_field_matches_interpolate_then_scale(rng):
    u = smooth_field(rng, (4, 5, 3), 2.0)
    up = upsample_field(u)
    for axis_out in range(3):
        for z, y, x in [(0, 0, 0), (7, 9, 5), (3, 4, 2), (1, 8, 0)]:
            # half-voxel aligned source coordinate, then vector doubled
            src = [(c + 0.5) / 2 - 0.5 for c in (z, y, x)]
            ref = 2.0 * trilinear_oracle(u[axis_out], *src)
            assert abs(up[axis_out, z, y, x] - ref) < 1e-6


def test_upsample_then_downsample_recovers_constant():
    u = np.zeros((3, 4, 4, 4))
    u[:] = np.array([0.5, -1.0, 2.0])[:, None, None, None]
    back = downsample_volume(upsample_field(u)) / 2.0
    assert np.array_equal(back, u)


def test_downsample_examples(rng):
    assert np.array_equal(downsample_volume(np.full((1, 4, 4, 4), 3.0)), np.full((1, 2, 2, 2), 3.0))
    cb = (np.indices((4, 4, 4)).sum(axis=0) % 2).astype(float)[None]
    assert np.array_equal(downsample_volume(cb), np.full((1, 2, 2, 2), 0.5))
    img = rng.normal(size=(2, 4, 4, 4))
    out = downsample_volume(img)
    for c in range(2):
        for z in range(2):
            for y in range(2):
                for x in range(2):
                    ref = np.mean([img[c, 2 * z + a, 2 * y + b, 2 * x + d]
                                   for a in range(2) for b in range(2) for d in range(2)])
                    assert abs(out[c, z, y, x] - ref) < 1e-7
    with pytest.raises(ContractError):
        downsample_volume(np.zeros((1, 3, 4, 4)))


def test_resize_constant_is_exact():
    assert np.allclose(resize(np.full((1, 3, 5, 7), 2.5), (6, 4, 9)), 2.5, atol=1e-15)


def test_jacobian_examples():
    assert np.array_equal(jacobian_det(np.zeros((3, 5, 5, 5))), np.ones((3, 3, 3)))
    u = np.zeros((3, 6, 6, 6))
    u[2] = -2.0 * np.arange(6.0)[None, None, :]
    j = jacobian_det(u)
    assert np.allclose(j, -1.0)
    assert fold_fraction(j) == 1.0
    assert fold_fraction(jacobian_det(np.zeros((3, 4, 4, 4)))) == 0.0
    with pytest.raises(ContractError):
        jacobian_det(np.zeros((3, 2, 5, 5)))


def test_jacobian_matches_symbolic_determinant(rng):
    u = smooth_field(rng, (6, 7, 5), 2.0)
    j = jacobian_det(u)
    for z in range(1, 5):
        for y in range(1, 6):
            for x in range(1, 4):
                M = np.eye(3)
                for a in range(3):
                    M[a, 0] += (u[a, z + 1, y, x] - u[a, z - 1, y, x]) / 2
                    M[a, 1] += (u[a, z, y + 1, x] - u[a, z, y - 1, x]) / 2
                    M[a, 2] += (u[a, z, y, x + 1] - u[a, z, y, x - 1]) / 2
                a_, b_, c_ = M
                det = (a_[0] * (b_[1] * c_[2] - b_[2] * c_[1]) - a_[1] * (b_[0] * c_[2] - b_[2] * c_[0])
                       + a_[2] * (b_[0] * c_[1] - b_[1] * c_[0]))
                assert abs(j[z - 1, y - 1, x - 1] - det) < 1e-6


def test_fold_fraction_counting_oracle(rng):
    u = rng.normal(scale=1.5, size=(3, 6, 6, 6))
    j = jacobian_det(u)
    count = sum(1 for v in j.ravel() if v <= 0)
    assert fold_fraction(j) == count / j.size


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 4.0))
def test_constant_field_warp_equals_translation(seed, t):
    r = np.random.default_rng(seed)
    img = r.normal(size=(1, 6, 6, 6))
    u = np.zeros((3, 6, 6, 6))
    axis = int(r.integers(3))
    u[axis] = float(int(t))
    out = warp(img, u)
    idx = np.minimum(np.arange(6) + int(t), 5)
    ref = np.take(img, idx, axis=axis + 1)
    assert np.array_equal(out, ref)
