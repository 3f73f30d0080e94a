"""Finite-difference verification of every hand-written backward pass.

Each check draws random inputs from ``Rng(seed, stream=3)``, compares the
analytic gradient with central differences and reports the relative error
``||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-8)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers, losses, selection
from .config import ModelConfig
from .model import LossTerms, build_model, compute_losses, mine_triplets, model_backward, model_forward
from .tensor import Rng

EPS = 1e-5
TOL_LINEAR = 1e-5
TOL_NONLINEAR = 1e-4
TOL_MODEL = 1e-3
MODEL_ENTRIES_PER_PARAM = 3
KINK_TOL = 1e-6


@dataclass
class CheckResult:
    name: str
    seed: int
    rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.rel_err) and self.rel_err < self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name} seed={self.seed} rel_err={self.rel_err:.3e} tol={self.tol:.0e}"


@dataclass
class GradcheckReport:
    results: list[CheckResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> list[str]:
        return [r.line() for r in self.results]


def rel_error(analytic, numeric) -> float:
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
    return float(np.linalg.norm(a - n) / scale)


def numeric_grad(f: Callable[[], float], x: np.ndarray, indices=None, eps: float = EPS) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place)."""
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        out.append((hi - lo) / (2 * eps))
    return np.asarray(out)


def _compare(name, seed, tol, f, pairs) -> CheckResult:
    """``pairs``: list of (array, analytic grad). All errors pooled into one vector."""
    ana, num = [], []
    for x, g in pairs:
        ana.append(np.ravel(g))
        num.append(numeric_grad(f, x))
    return CheckResult(name, seed, rel_error(np.concatenate(ana), np.concatenate(num)), tol)


def _away_from_nodes(rng: Rng, shape, n: int, margin: float = 0.05) -> np.ndarray:
    """Normalized coords whose pixel position keeps ``margin`` from every grid node."""
    p = rng.uniform(0.0, n - 1, shape)
    frac = p - np.floor(p)
    p = np.floor(p) + np.clip(frac, margin, 1 - margin)
    p = np.minimum(p, n - 1 - margin)
    return 2.0 * p / (n - 1) - 1.0


# ---------------------------------------------------------------------------
# individual checks; each returns one CheckResult


def check_conv2d(rng: Rng, seed: int) -> CheckResult:
    x = rng.normal(0, 1, (2, 3, 6, 5))
    w = rng.normal(0, 1, (4, 3, 3, 3))
    b = rng.normal(0, 1, (4,))
    r = rng.normal(0, 1, (2, 4, 3, 3))

    def f():
        return float(np.sum(layers.conv2d(x, w, b, 2, 1)[0] * r))

    _, cache = layers.conv2d(x, w, b, 2, 1)
    gx, gw, gb = layers.conv2d_backward(cache, r)
    return _compare("conv2d", seed, TOL_LINEAR, f, [(x, gx), (w, gw), (b, gb)])


def check_fully_connected(rng: Rng, seed: int) -> CheckResult:
    x = rng.normal(0, 1, (3, 5))
    w = rng.normal(0, 1, (4, 5))
    b = rng.normal(0, 1, (4,))
    r = rng.normal(0, 1, (3, 4))

    def f():
        return float(np.sum(layers.fully_connected(x, w, b)[0] * r))

    _, cache = layers.fully_connected(x, w, b)
    gx, gw, gb = layers.fully_connected_backward(cache, r)
    return _compare("fully_connected", seed, TOL_LINEAR, f, [(x, gx), (w, gw), (b, gb)])


def check_global_avg_pool(rng: Rng, seed: int) -> CheckResult:
    x = rng.normal(0, 1, (2, 3, 4, 5))
    r = rng.normal(0, 1, (2, 3))

    def f():
        return float(np.sum(layers.global_avg_pool(x)[0] * r))

    _, cache = layers.global_avg_pool(x)
    return _compare("global_avg_pool", seed, TOL_LINEAR, f, [(x, layers.global_avg_pool_backward(cache, r))])


def check_max_pool(rng: Rng, seed: int) -> CheckResult:
    x = rng.normal(0, 1, (2, 3, 7, 7))
    r = rng.normal(0, 1, (2, 3, 3, 3))

    def f():
        return float(np.sum(layers.max_pool(x, 3)[0] * r))

    _, cache = layers.max_pool(x, 3)
    return _compare("max_pool", seed, TOL_NONLINEAR, f, [(x, layers.max_pool_backward(cache, r))])


def check_relu(rng: Rng, seed: int) -> CheckResult:
    x = rng.normal(0, 1, (3, 7))
    x[np.abs(x) < 1e-3] = 0.5  # stay off the kink
    r = rng.normal(0, 1, (3, 7))

    def f():
        return float(np.sum(layers.relu(x)[0] * r))

    _, cache = layers.relu(x)
    return _compare("relu", seed, TOL_NONLINEAR, f, [(x, layers.relu_backward(cache, r))])


def check_softmax2d(rng: Rng, seed: int) -> CheckResult:
    m = rng.normal(0, 1, (2, 3, 5, 5))
    r = rng.normal(0, 1, (2, 3, 5, 5))

    def f():
        return float(np.sum(layers.softmax2d(m)[0] * r))

    _, cache = layers.softmax2d(m)
    return _compare("softmax2d", seed, TOL_NONLINEAR, f, [(m, layers.softmax2d_backward(cache, r))])


def check_cross_entropy(rng: Rng, seed: int) -> CheckResult:
    z = rng.normal(0, 2, (4, 6))
    y = rng.integers(0, 6, (4,))

    def f():
        return layers.cross_entropy(z, y)[0]

    _, cache = layers.cross_entropy(z, y)
    return _compare("cross_entropy", seed, TOL_NONLINEAR, f, [(z, layers.cross_entropy_backward(cache))])


def check_group_channel_pool(rng: Rng, seed: int) -> CheckResult:
    f_cat = rng.normal(0, 1, (2, 6, 4, 4))
    w = rng.normal(0, 1, (8, 6, 1, 1))
    b = rng.normal(0, 1, (8,))
    r = rng.normal(0, 1, (2, 4, 4, 4))

    def f():
        return float(np.sum(selection.group_channel_pool(f_cat, w, b, 4)[0] * r))

    _, cache = selection.group_channel_pool(f_cat, w, b, 4)
    gx, gw, gb = selection.group_channel_pool_backward(cache, r)
    return _compare("group_channel_pool", seed, TOL_LINEAR, f, [(f_cat, gx), (w, gw), (b, gb)])


def check_soft_keypoints(rng: Rng, seed: int) -> CheckResult:
    m = rng.normal(0, 1, (2, 3, 5, 4))
    r = rng.normal(0, 1, (2, 3, 2))

    def f():
        return float(np.sum(selection.soft_keypoints(m)[0].coords * r))

    _, cache = selection.soft_keypoints(m)
    return _compare("soft_keypoints", seed, TOL_NONLINEAR, f, [(m, selection.soft_keypoints_backward(cache, r))])


def check_bilinear_features(rng: Rng, seed: int) -> CheckResult:
    fmap = rng.normal(0, 1, (2, 3, 5, 6))
    coords = rng.uniform(-1, 1, (2, 4, 2))
    r = rng.normal(0, 1, (2, 4, 3))

    def f():
        return float(np.sum(selection.bilinear_sample(fmap, coords)[0] * r))

    _, cache = selection.bilinear_sample(fmap, coords)
    gf, _ = selection.bilinear_sample_backward(cache, r)
    return _compare("bilinear_sample.features", seed, TOL_LINEAR, f, [(fmap, gf)])


def check_bilinear_coords(rng: Rng, seed: int) -> CheckResult:
    H, W = 5, 6
    fmap = rng.normal(0, 1, (2, 3, H, W))
    coords = np.stack(
        [_away_from_nodes(rng, (2, 4), W), _away_from_nodes(rng, (2, 4), H)], axis=-1
    )
    r = rng.normal(0, 1, (2, 4, 3))

    def f():
        return float(np.sum(selection.bilinear_sample(fmap, coords)[0] * r))

    _, cache = selection.bilinear_sample(fmap, coords)
    _, gc = selection.bilinear_sample_backward(cache, r)
    return _compare("bilinear_sample.coords", seed, TOL_NONLINEAR, f, [(coords, gc)])


def check_vi_loss(rng: Rng, seed: int) -> CheckResult:
    m = rng.normal(0, 1, (3, 4, 5, 5))
    head = losses.ViHead(rng.normal(0, 0.5, (6, 4, 2, 2)), rng.normal(0, 0.5, (6,)), rng.normal(0, 0.3, (6,)))
    y = rng.integers(0, 6, (3,))

    def f():
        return losses.vi_loss(m, y, head)[0]

    _, cache = losses.vi_loss(m, y, head)
    gm, gw, gb, gls = losses.vi_loss_backward(cache)
    return _compare(
        "vi_loss", seed, TOL_NONLINEAR, f,
        [(m, gm), (head.conv_w, gw), (head.conv_b, gb), (head.log_sigma, gls)],
    )


def check_multimodal_corr(rng: Rng, seed: int) -> CheckResult:
    a = rng.normal(0, 1, (3, 4, 5))
    b = rng.normal(0, 1, (3, 4, 5))

    def f():
        return losses.multimodal_corr_loss(a, b)[0]

    _, cache = losses.multimodal_corr_loss(a, b)
    ga, gb = losses.multimodal_corr_loss_backward(cache)
    return _compare("multimodal_corr_loss", seed, TOL_NONLINEAR, f, [(a, ga), (b, gb)])


def check_triplet_corr(rng: Rng, seed: int) -> CheckResult:
    a = rng.normal(0, 1, (3, 4, 5))
    p = rng.normal(0, 1, (3, 4, 5))
    n = rng.normal(0, 1, (3, 4, 5))

    def f():
        return losses.triplet_corr_loss(a, p, n, 1.0)[0]

    _, cache = losses.triplet_corr_loss(a, p, n, 1.0)
    ga, gp, gn = losses.triplet_corr_loss_backward(cache)
    return _compare("triplet_corr_loss", seed, TOL_NONLINEAR, f, [(a, ga), (p, gp), (n, gn)])


def check_aux_ce(rng: Rng, seed: int) -> CheckResult:
    zr = rng.normal(0, 1, (4, 5))
    zd = rng.normal(0, 1, (4, 5))
    y = rng.integers(0, 5, (4,))

    def f():
        return losses.aux_ce_loss(zr, zd, y)[0]

    _, cache = losses.aux_ce_loss(zr, zd, y)
    gr, gd = losses.aux_ce_loss_backward(cache)
    return _compare("aux_ce_loss", seed, TOL_NONLINEAR, f, [(zr, gr), (zd, gd)])


def check_dlfs(rng: Rng, seed: int) -> CheckResult:
    config = selection.DlfsConfig(ks=(4, 2), channels=8, stages=((3, 2),))
    cf = 3
    params = {k: rng.normal(0, 0.5, s) for k, s in selection.dlfs_param_shapes(config, cf).items()}
    f_rgb = rng.normal(0, 1, (2, cf, 7, 7))
    f_d = rng.normal(0, 1, (2, cf, 7, 7))
    r_rgb = rng.normal(0, 1, (2, config.total_k, cf))
    r_d = rng.normal(0, 1, (2, config.total_k, cf))

    def f():
        sel, _, _ = selection.dlfs_forward(f_rgb, f_d, config, params)
        return float(np.sum(sel.e_rgb * r_rgb) + np.sum(sel.e_d * r_d))

    _, _, cache = selection.dlfs_forward(f_rgb, f_d, config, params)
    g_rgb, g_d, gp = selection.dlfs_backward(cache, r_rgb, r_d)
    pairs = [(f_rgb, g_rgb), (f_d, g_d)] + [(params[k], gp[k]) for k in params]
    return _compare("dlfs", seed, TOL_NONLINEAR, f, pairs)


GRADCHECK_MODEL = ModelConfig(
    input_size=(12, 12),
    channels=(3, 4),
    num_classes=3,
    global_dim=5,
    dlfs=selection.DlfsConfig(ks=(2, 1), channels=4, stages=((3, 2),)),
)


def check_full_model(rng: Rng, seed: int) -> CheckResult:
    """Total training loss of a tiny model; a few sampled entries per parameter.

    Entries whose finite difference straddles a kink are skipped.
    """
    params = build_model(GRADCHECK_MODEL, seed)
    # zero biases put ReLUs exactly on their kink wherever the input patch is all zero
    for name, p in params.items():
        if name.endswith(".b"):
            p.value[...] = rng.normal(0.0, 0.1, p.value.shape)
    B = 4
    x_rgb = rng.uniform(0, 1, (B, 3, 12, 12))
    x_d = rng.uniform(0, 1, (B, 3, 12, 12))
    y = np.array([0, 0, 1, 2])
    trip = mine_triplets(y, rng.substream(1))
    terms = LossTerms()

    def f():
        out = model_forward(params, x_rgb, x_d)
        return compute_losses(params, out, y, terms, trip)[0].total

    params.zero_grad()
    out = model_forward(params, x_rgb, x_d)
    _, grads = compute_losses(params, out, y, terms, trip)
    model_backward(params, out.cache, grads)
    ana, num = [], []
    for name, p in params.items():
        picks = rng.permutation(p.value.size)[:MODEL_ENTRIES_PER_PARAM]
        coarse = numeric_grad(f, p.value, picks)
        fine = numeric_grad(f, p.value, picks, EPS / 10)
        # a ReLU or max-pool switch inside the probe shows up as step-size dependence
        smooth = np.abs(coarse - fine) <= KINK_TOL * np.maximum(np.abs(fine), 1.0)
        ana.append(p.grad.reshape(-1)[picks][smooth])
        num.append(fine[smooth])
    return CheckResult("full_model", seed, rel_error(np.concatenate(ana), np.concatenate(num)), TOL_MODEL)


CHECKS: tuple[Callable[[Rng, int], CheckResult], ...] = (
    check_conv2d,
    check_fully_connected,
    check_global_avg_pool,
    check_max_pool,
    check_relu,
    check_softmax2d,
    check_cross_entropy,
    check_group_channel_pool,
    check_soft_keypoints,
    check_bilinear_features,
    check_bilinear_coords,
    check_vi_loss,
    check_multimodal_corr,
    check_triplet_corr,
    check_aux_ce,
    check_dlfs,
    check_full_model,
)


def gradcheck_suite(seed_count: int, checks=CHECKS, on_result=None) -> GradcheckReport:
    """Run every check for seeds ``0 .. seed_count - 1``."""
    results = []
    for seed in range(seed_count):
        for i, check in enumerate(checks):
            res = check(Rng(seed, stream=3).substream(i), seed)
            results.append(res)
            if on_result is not None:
                on_result(res)
    return GradcheckReport(results)
