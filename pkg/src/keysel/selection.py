"""Differentiable local feature selection.

From aligned feature maps of two modalities, predict ``K`` soft keypoints per
pyramid scale and bilinearly sample one feature vector per keypoint from
each modality at the shared coordinates. Everything has an analytic
backward pass.

Coordinate convention: ``x`` runs along the width axis (index ``v``), ``y``
along the height axis (index ``u``). Both are normalized to ``[-1, 1]`` with
``x~(v) = 2v/(W-1) - 1``; a side of length one maps to coordinate 0.
Batched arrays are used throughout: maps are ``(B, C, H, W)`` and
coordinates ``(B, K, 2)`` holding ``(x, y)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers
from .errors import BadConfig, CoordOutOfRange, DivisibilityViolation, ShapeMismatch
from .layers import LayerCache
from .tensor import Tensor, as_tensor

COORD_TOL = 1e-9


@dataclass(frozen=True)
class DlfsConfig:
    """Keypoints per scale, conv1x1 width, and the pyramid stage geometry.

    ``stages[i]`` is the ``(kernel, stride)`` of the conv producing scale
    ``i + 1`` from scale ``i``; there is one more scale than stages.
    """

    ks: tuple[int, ...] = (16, 4)
    channels: int = 32
    stages: tuple[tuple[int, int], ...] = ((3, 2),)

    def __post_init__(self):
        object.__setattr__(self, "ks", tuple(int(k) for k in self.ks))
        object.__setattr__(self, "stages", tuple((int(a), int(b)) for a, b in self.stages))
        if len(self.ks) != len(self.stages) + 1:
            raise BadConfig(f"{len(self.ks)} K values for {len(self.stages) + 1} scales")
        if any(k < 1 for k in self.ks):
            raise BadConfig(f"every K must be >= 1, got {self.ks}")
        for k in self.ks:
            if self.channels % k:
                raise DivisibilityViolation(f"conv channels {self.channels} not divisible by K={k}")

    @property
    def num_scales(self) -> int:
        return len(self.ks)

    @property
    def total_k(self) -> int:
        return sum(self.ks)


@dataclass
class KeypointSet:
    coords: Tensor  # (B, K, 2) as (x, y)
    attn: Tensor  # (B, K, H, W)
    grouped: Tensor  # (B, K, H, W)


@dataclass
class SelectedFeatures:
    e_rgb: Tensor  # (B, sum K, C_f)
    e_d: Tensor
    ks: tuple[int, ...] = field(default=())

    def per_scale(self):
        """Yield ``(e_rgb, e_d)`` slices for each scale."""
        start = 0
        for k in self.ks:
            yield self.e_rgb[:, start : start + k], self.e_d[:, start : start + k]
            start += k


def grid_coords(n: int) -> Tensor:
    """Normalized coordinate of each of ``n`` grid positions."""
    if n == 1:
        return np.zeros(1)
    return 2.0 * np.arange(n) / (n - 1) - 1.0


def to_pixel(c, n: int):
    """Inverse of :func:`grid_coords` for continuous coordinates."""
    return (np.asarray(c) + 1.0) * (n - 1) / 2.0


# ---------------------------------------------------------------------------
# group channel pooling


def group_channel_pool(f_rgbd, w, b, k: int) -> tuple[Tensor, LayerCache]:
    """conv1x1 to ``C`` channels, then sum each of ``K`` groups of ``C/K`` channels."""
    f, single = layers._batched(f_rgbd, 4)
    w = as_tensor(w)
    C = w.shape[0]
    if k < 1 or C % k:
        raise DivisibilityViolation(f"conv channels {C} not divisible by K={k}")
    if w.ndim == 2:
        w = w[:, :, None, None]
    v, conv_cache = layers.conv2d(f, w, b)
    B, _, H, W = v.shape
    m = v.reshape(B, k, C // k, H, W).sum(axis=2)
    cache = LayerCache("group_pool", conv=conv_cache, k=k, group=C // k, single=single)
    return (m[0] if single else m), cache


def group_channel_pool_backward(cache: LayerCache, grad_m) -> tuple[Tensor, Tensor, Tensor]:
    c = cache.take("group_pool")
    g, _ = layers._batched(grad_m, 4)
    B, K, H, W = g.shape
    gv = np.broadcast_to(g[:, :, None], (B, K, c.group, H, W)).reshape(B, K * c.group, H, W)
    gx, gw, gb = layers.conv2d_backward(c.conv, np.ascontiguousarray(gv))
    return (gx[0] if c.single else gx), gw, gb


# ---------------------------------------------------------------------------
# soft keypoints


def soft_keypoints(m) -> tuple[KeypointSet, LayerCache]:
    """Spatial softmax per map, then the expected normalized (x, y) location."""
    m, single = layers._batched(m, 4)
    h, sm_cache = layers.softmax2d(m)
    H, W = m.shape[-2:]
    xs = grid_coords(W)
    ys = grid_coords(H)
    x = np.einsum("bkuv,v->bk", h, xs)
    y = np.einsum("bkuv,u->bk", h, ys)
    coords = np.stack([x, y], axis=-1)
    kp = KeypointSet(coords=coords, attn=h, grouped=m)
    if single:
        kp = KeypointSet(coords=coords[0], attn=h[0], grouped=m[0])
    return kp, LayerCache("soft_keypoints", sm=sm_cache, xs=xs, ys=ys, single=single)


def soft_keypoints_backward(cache: LayerCache, grad_coords, grad_attn=None) -> Tensor:
    c = cache.take("soft_keypoints")
    gc, _ = layers._batched(grad_coords, 3)
    gh = gc[..., 0, None, None] * c.xs[None, None, None, :] + gc[..., 1, None, None] * c.ys[None, None, :, None]
    if grad_attn is not None:
        ga, _ = layers._batched(grad_attn, 4)
        gh = gh + ga
    gm = layers.softmax2d_backward(c.sm, gh)
    return gm[0] if c.single else gm


# ---------------------------------------------------------------------------
# bilinear sampling


def tent(d):
    """Bilinear kernel ``max(0, 1 - |d|)``."""
    return np.maximum(0.0, 1.0 - np.abs(d))


def tent_slope(grid, p):
    """Derivative of ``tent(p - grid)`` w.r.t. ``p``.

    Zero once the distance reaches one pixel, +1 where the grid index is at
    or beyond the coordinate, -1 otherwise.
    """
    grid = np.asarray(grid, dtype=np.float64)
    return np.where(np.abs(grid - p) >= 1.0, 0.0, np.where(grid >= p, 1.0, -1.0))


def _check_coords(coords) -> Tensor:
    coords = as_tensor(coords)
    if coords.shape[-1] != 2:
        raise ShapeMismatch(f"coords must end in 2, got {coords.shape}")
    worst = np.max(np.abs(coords)) if coords.size else 0.0
    if worst > 1.0 + COORD_TOL:
        raise CoordOutOfRange(f"|coord| = {worst!r} exceeds 1")
    return np.clip(coords, -1.0, 1.0)


def _snap_to_nodes(p, n: int):
    """Round pixel positions within a few ulps of a node onto it, so node coords read back exactly."""
    r = np.round(p)
    return np.where(np.abs(p - r) <= 8 * np.finfo(np.float64).eps * max(n, 1), r, p)


def _corners(p, n: int):
    """Lower support node (clamped so the upper node stays in range)."""
    return np.clip(np.floor(p), 0, max(n - 2, 0)).astype(np.int64)


def bilinear_sample(f, coords) -> tuple[Tensor, LayerCache]:
    """Interpolate ``f`` at each keypoint; returns ``(B, K, C)`` (or ``(K, C)``)."""
    f, single = layers._batched(f, 4)
    coords = _check_coords(coords)
    if single:
        coords = coords[None]
    B, C, H, W = f.shape
    if coords.ndim != 3 or coords.shape[0] != B:
        raise ShapeMismatch(f"coords {coords.shape} for batch {B}")
    K = coords.shape[1]
    px = _snap_to_nodes(to_pixel(coords[..., 0], W), W)
    py = _snap_to_nodes(to_pixel(coords[..., 1], H), H)
    x0 = _corners(px, W)
    y0 = _corners(py, H)
    bi = np.arange(B)[:, None]
    out = np.zeros((B, K, C))
    for dy in (0, 1):
        u = y0 + dy
        wy = tent(py - u)
        ui = np.minimum(u, H - 1)
        for dx in (0, 1):
            v = x0 + dx
            wx = tent(px - v)
            vi = np.minimum(v, W - 1)
            out += (wy * wx)[..., None] * f[bi, :, ui, vi]
    cache = LayerCache(
        "bilinear", f=f, px=px, py=py, x0=x0, y0=y0, single=single
    )
    return (out[0] if single else out), cache


def bilinear_sample_backward(cache: LayerCache, grad_e) -> tuple[Tensor, Tensor]:
    """Gradients w.r.t. the feature map and the normalized coordinates."""
    c = cache.take("bilinear")
    g, _ = layers._batched(grad_e, 3)
    f = c.f
    B, C, H, W = f.shape
    if g.shape != (B, c.px.shape[1], C):
        raise ShapeMismatch(f"grad_e {g.shape}")
    bi = np.arange(B)[:, None]
    grad_f = np.zeros_like(f)
    grad_px = np.zeros_like(c.px)
    grad_py = np.zeros_like(c.py)
    for dy in (0, 1):
        u = c.y0 + dy
        wy = tent(c.py - u)
        sy = tent_slope(u, c.py)
        ui = np.minimum(u, H - 1)
        for dx in (0, 1):
            v = c.x0 + dx
            wx = tent(c.px - v)
            sx = tent_slope(v, c.px)
            vi = np.minimum(v, W - 1)
            node = f[bi, :, ui, vi]  # B,K,C
            proj = np.einsum("bkc,bkc->bk", g, node)
            grad_px += wy * sx * proj
            grad_py += sy * wx * proj
            # add.at: several keypoints may share a node
            w = (wy * wx)[..., None] * g
            np.add.at(grad_f.transpose(0, 2, 3, 1), (bi, ui, vi), w)
    scale_x = (W - 1) / 2.0
    scale_y = (H - 1) / 2.0
    grad_coords = np.stack([grad_px * scale_x, grad_py * scale_y], axis=-1)
    if c.single:
        return grad_f[0], grad_coords[0]
    return grad_f, grad_coords


# ---------------------------------------------------------------------------
# composite


def dlfs_param_shapes(config: DlfsConfig, feat_channels: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for i, (kernel, _stride) in enumerate(config.stages, start=1):
        for mod in ("rgb", "d"):
            shapes[f"pyr.s{i}.{mod}.w"] = (feat_channels, feat_channels, kernel, kernel)
            shapes[f"pyr.s{i}.{mod}.b"] = (feat_channels,)
    for i in range(config.num_scales):
        shapes[f"dlfs.s{i}.w"] = (config.channels, 2 * feat_channels, 1, 1)
        shapes[f"dlfs.s{i}.b"] = (config.channels,)
    return shapes


def dlfs_forward(f_rgb, f_d, config: DlfsConfig, params: dict[str, Tensor]):
    """Run every pyramid scale; returns ``(selected, keypoints_per_scale, cache)``.

    Scale 0 works on the given maps; scale ``i`` on a stride conv + ReLU of
    scale ``i - 1`` (separate weights per modality). At each scale the two
    modalities are concatenated, grouped into ``K`` response maps, turned
    into soft keypoints, and both modalities are sampled at those points.
    """
    f_rgb = as_tensor(f_rgb)
    f_d = as_tensor(f_d)
    if f_rgb.shape != f_d.shape or f_rgb.ndim != 4:
        raise ShapeMismatch(f"modalities must be aligned (B,C,H,W): {f_rgb.shape} vs {f_d.shape}")
    scales = []
    cur_rgb, cur_d = f_rgb, f_d
    e_rgb, e_d, kps = [], [], []
    for i, k in enumerate(config.ks):
        rec = {}
        if i > 0:
            kernel, stride = config.stages[i - 1]
            a, rec["pyr_rgb"] = layers.conv2d(cur_rgb, params[f"pyr.s{i}.rgb.w"], params[f"pyr.s{i}.rgb.b"], stride)
            cur_rgb, rec["pyr_rgb_relu"] = layers.relu(a)
            a, rec["pyr_d"] = layers.conv2d(cur_d, params[f"pyr.s{i}.d.w"], params[f"pyr.s{i}.d.b"], stride)
            cur_d, rec["pyr_d_relu"] = layers.relu(a)
        cf = cur_rgb.shape[1]
        f_cat = np.concatenate([cur_rgb, cur_d], axis=1)
        m, rec["group"] = group_channel_pool(f_cat, params[f"dlfs.s{i}.w"], params[f"dlfs.s{i}.b"], k)
        kp, rec["kp"] = soft_keypoints(m)
        er, rec["samp_rgb"] = bilinear_sample(cur_rgb, kp.coords)
        ed, rec["samp_d"] = bilinear_sample(cur_d, kp.coords)
        rec["cf"] = cf
        scales.append(rec)
        e_rgb.append(er)
        e_d.append(ed)
        kps.append(kp)
    sel = SelectedFeatures(np.concatenate(e_rgb, axis=1), np.concatenate(e_d, axis=1), config.ks)
    cache = LayerCache("dlfs", scales=scales, config=config)
    return sel, kps, cache


def dlfs_backward(cache: LayerCache, grad_e_rgb, grad_e_d, grad_m=None):
    """Chain through sampling (maps and coordinates), expectation, softmax,
    group sum and conv1x1, then back down the pyramid.

    ``grad_m`` optionally carries an extra gradient per scale w.r.t. the
    grouped response maps (e.g. from a loss defined on them).
    Returns ``(grad_f_rgb, grad_f_d, grad_params)``.
    """
    c = cache.take("dlfs")
    config: DlfsConfig = c.config
    grad_e_rgb = as_tensor(grad_e_rgb)
    grad_e_d = as_tensor(grad_e_d)
    offsets = np.cumsum((0,) + config.ks)
    grads: dict[str, Tensor] = {}
    carry_rgb = carry_d = None
    for i in reversed(range(config.num_scales)):
        rec = c.scales[i]
        sl = slice(offsets[i], offsets[i + 1])
        gf_rgb, gc_rgb = bilinear_sample_backward(rec["samp_rgb"], grad_e_rgb[:, sl])
        gf_d, gc_d = bilinear_sample_backward(rec["samp_d"], grad_e_d[:, sl])
        gm = soft_keypoints_backward(rec["kp"], gc_rgb + gc_d)
        if grad_m is not None and grad_m[i] is not None:
            gm = gm + grad_m[i]
        gcat, grads[f"dlfs.s{i}.w"], grads[f"dlfs.s{i}.b"] = group_channel_pool_backward(rec["group"], gm)
        cf = rec["cf"]
        gf_rgb = gf_rgb + gcat[:, :cf]
        gf_d = gf_d + gcat[:, cf:]
        if carry_rgb is not None:
            gf_rgb = gf_rgb + carry_rgb
            gf_d = gf_d + carry_d
        if i > 0:
            a = layers.relu_backward(rec["pyr_rgb_relu"], gf_rgb)
            carry_rgb, grads[f"pyr.s{i}.rgb.w"], grads[f"pyr.s{i}.rgb.b"] = layers.conv2d_backward(rec["pyr_rgb"], a)
            a = layers.relu_backward(rec["pyr_d_relu"], gf_d)
            carry_d, grads[f"pyr.s{i}.d.w"], grads[f"pyr.s{i}.d.b"] = layers.conv2d_backward(rec["pyr_d"], a)
        else:
            return gf_rgb, gf_d, grads
    raise AssertionError("unreachable")
