import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from keysel import selection
from keysel.errors import CoordOutOfRange, DivisibilityViolation, ShapeMismatch
from keysel.gradcheck import check_bilinear_coords, numeric_grad, rel_error
from keysel.selection import DlfsConfig
from keysel.tensor import Rng


def double_sum_sample(f, x, y):
    """Explicit sum over every grid node of F * tent(x - v) * tent(y - u), in pixel units."""
    C, H, W = f.shape
    out = np.zeros(C)
    for u in range(H):
        for v in range(W):
            out += f[:, u, v] * max(0.0, 1 - abs(x - v)) * max(0.0, 1 - abs(y - u))
    return out


def test_bilinear_matches_double_sum():
    rng = np.random.default_rng(0)
    for _ in range(50):
        H, W = rng.integers(1, 7, 2)
        f = rng.normal(size=(3, H, W))
        coords = rng.uniform(-1, 1, (4, 2))
        e, _ = selection.bilinear_sample(f, coords)
        for k in range(4):
            x = selection.to_pixel(coords[k, 0], W)
            y = selection.to_pixel(coords[k, 1], H)
            assert np.max(np.abs(e[k] - double_sum_sample(f, x, y))) < 1e-12


def test_bilinear_grid_nodes_are_exact_lookups():
    f = np.random.default_rng(1).normal(size=(2, 4, 5))
    xs, ys = selection.grid_coords(5), selection.grid_coords(4)
    coords = np.array([[x, y] for y in ys for x in xs])
    e, _ = selection.bilinear_sample(f, coords)
    assert np.array_equal(e, f.reshape(2, -1).T)


def test_bilinear_batch_and_errors():
    f = np.random.default_rng(2).normal(size=(2, 3, 4, 4))
    coords = np.zeros((2, 5, 2))
    e, _ = selection.bilinear_sample(f, coords)
    assert e.shape == (2, 5, 3)
    with pytest.raises(CoordOutOfRange):
        selection.bilinear_sample(f[0], np.array([[1.5, 0.0]]))
    with pytest.raises(ShapeMismatch):
        selection.bilinear_sample(f, np.zeros((3, 5, 2)))
    # rounding slack just past the edge is clipped rather than rejected
    e, _ = selection.bilinear_sample(f[0], np.array([[1 + 1e-12, -1 - 1e-12]]))
    assert np.allclose(e[0], f[0, :, 0, 3])


def test_bilinear_backward_finite_differences():
    rng = np.random.default_rng(3)
    f = rng.normal(size=(2, 3, 5, 6))
    coords = rng.uniform(-0.95, 0.95, (2, 4, 2))
    r = rng.normal(size=(2, 4, 3))
    _, cache = selection.bilinear_sample(f, coords)
    gf, gc = selection.bilinear_sample_backward(cache, r)

    def obj():
        return float(np.sum(selection.bilinear_sample(f, coords)[0] * r))

    assert rel_error(gf, numeric_grad(obj, f)) < 1e-6
    assert rel_error(gc, numeric_grad(obj, coords)) < 1e-5


def test_tent_slope_convention():
    assert selection.tent_slope(2, 1.5) == 1.0
    assert selection.tent_slope(1, 1.5) == -1.0
    assert selection.tent_slope(1, 1.0) == 1.0  # grid >= p
    assert selection.tent_slope(3, 1.5) == 0.0


def test_corrupted_slope_sign_is_caught(monkeypatch):
    assert check_bilinear_coords(Rng(0).substream(10), 0).passed
    original = selection.tent_slope
    monkeypatch.setattr(selection, "tent_slope", lambda grid, p: -original(grid, p))
    assert not check_bilinear_coords(Rng(0).substream(10), 0).passed


def test_soft_keypoints_invariants():
    rng = np.random.default_rng(4)
    for _ in range(50):
        H, W = rng.integers(1, 8, 2)
        m = rng.normal(size=(3, H, W)) * rng.uniform(0.1, 20)
        kp, _ = selection.soft_keypoints(m)
        assert np.allclose(kp.attn.sum(axis=(-2, -1)), 1.0, atol=1e-9)
        assert np.all(np.abs(kp.coords) <= 1.0)


def test_soft_keypoints_axes_and_sharpening():
    m = np.zeros((1, 3, 5))
    m[0, 2, 4] = 1.0  # bottom row, rightmost column
    kp, _ = selection.soft_keypoints(m * 100)
    assert np.allclose(kp.coords[0], [1.0, 1.0], atol=1e-3)
    m = np.zeros((1, 3, 5))
    m[0, 0, 1] = 1.0
    kp, _ = selection.soft_keypoints(m * 100)
    assert np.allclose(kp.coords[0], [selection.grid_coords(5)[1], -1.0], atol=1e-3)
    kp, _ = selection.soft_keypoints(np.zeros((2, 4, 4)))
    assert np.allclose(kp.coords, 0.0)


def test_soft_keypoints_backward_finite_differences():
    rng = np.random.default_rng(5)
    m = rng.normal(size=(2, 3, 4, 5))
    r = rng.normal(size=(2, 3, 2))
    ra = rng.normal(size=(2, 3, 4, 5))
    _, cache = selection.soft_keypoints(m)
    g = selection.soft_keypoints_backward(cache, r, ra)

    def obj():
        kp, _ = selection.soft_keypoints(m)
        return float(np.sum(kp.coords * r) + np.sum(kp.attn * ra))

    assert rel_error(g, numeric_grad(obj, m)) < 1e-6


def test_group_channel_pool_sums_groups():
    rng = np.random.default_rng(6)
    f = rng.normal(size=(4, 3, 3))
    w = rng.normal(size=(6, 4, 1, 1))
    b = rng.normal(size=6)
    m, _ = selection.group_channel_pool(f, w, b, 3)
    v = np.einsum("oc,chw->ohw", w[:, :, 0, 0], f) + b[:, None, None]
    assert np.allclose(m, v.reshape(3, 2, 3, 3).sum(axis=1), atol=1e-12)
    with pytest.raises(DivisibilityViolation):
        selection.group_channel_pool(f, w, b, 4)


def test_dlfs_config_validation():
    with pytest.raises(DivisibilityViolation):
        DlfsConfig(ks=(5,), channels=32, stages=())
    with pytest.raises(Exception):
        DlfsConfig(ks=(4, 2), channels=32, stages=())
    cfg = DlfsConfig()
    assert cfg.ks == (16, 4) and cfg.total_k == 20 and cfg.num_scales == 2


def test_dlfs_forward_shapes_and_pyramid():
    cfg = DlfsConfig(ks=(16, 4), channels=32, stages=((3, 2),))
    rng = Rng(0)
    params = {k: rng.normal(0, 0.1, s) for k, s in selection.dlfs_param_shapes(cfg, 32).items()}
    f = rng.normal(0, 1, (2, 32, 8, 8))
    sel, kps, _ = selection.dlfs_forward(f, f.copy(), cfg, params)
    assert sel.e_rgb.shape == (2, 20, 32)
    assert kps[0].attn.shape == (2, 16, 8, 8)
    assert kps[1].attn.shape == (2, 4, 3, 3)  # second scale is 3x3
    assert [a.shape for a, _ in sel.per_scale()] == [(2, 16, 32), (2, 4, 32)]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_dlfs_identical_modalities_sample_identical_features(seed):
    cfg = DlfsConfig(ks=(2,), channels=4, stages=())
    rng = Rng(seed)
    params = {k: rng.normal(0, 1, s) for k, s in selection.dlfs_param_shapes(cfg, 3).items()}
    f = rng.normal(0, 1, (1, 3, 4, 4))
    sel, _, _ = selection.dlfs_forward(f, f.copy(), cfg, params)
    assert np.array_equal(sel.e_rgb, sel.e_d)
