"""Training signals for the selection branch and their weighted total.

All batched losses return the mean over the batch (or over triplets) and
their backward functions return gradients of that mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from .errors import LabelOutOfRange, ShapeMismatch
from .layers import LayerCache
from .tensor import COSINE_EPS, Tensor, as_tensor

DEFAULT_MARGIN = 1.0


@dataclass
class ViHead:
    """Max-pool to ``S x S``, an ``S x S`` conv to ``N`` scalars, and per-class log sigma."""

    conv_w: Tensor  # (N, K, S, S)
    conv_b: Tensor  # (N,)
    log_sigma: Tensor  # (N,)

    @property
    def pool_size(self) -> int:
        return self.conv_w.shape[-1]

    @property
    def num_classes(self) -> int:
        return self.conv_w.shape[0]


@dataclass
class LossBundle:
    l_cls: float
    l_aux: float
    l_vi: float
    l_c: float
    total: float
    lambda1: float
    lambda2: float
    lambda3: float


def total_loss(l_cls, l_aux, l_vi, l_c, lambda1=1.0, lambda2=0.1, lambda3=0.1) -> LossBundle:
    total = l_cls + lambda1 * l_aux + lambda2 * l_vi + lambda3 * l_c
    return LossBundle(l_cls, l_aux, l_vi, l_c, total, lambda1, lambda2, lambda3)


def _labels(label, batch: int, n: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if labels.shape != (batch,):
        raise ShapeMismatch(f"{labels.shape[0]} labels for batch {batch}")
    if np.any(labels < 0) or np.any(labels >= n):
        raise LabelOutOfRange(f"labels {labels.tolist()} outside [0, {n})")
    return labels


# ---------------------------------------------------------------------------
# variational information loss


def vi_loss(m, label, head: ViHead) -> tuple[float, LayerCache]:
    """Gaussian negative log-likelihood of the one-hot label given pooled responses.

    Per sample: ``sum_n log(sigma_n) + (L_n - U_n)^2 / (2 sigma_n^2)`` where
    ``U`` is the S x S conv of the max-pooled response maps. The additive
    constant is dropped.
    """
    m, _ = layers._batched(m, 4)
    B = m.shape[0]
    N = head.num_classes
    labels = _labels(label, B, N)
    t, pool_cache = layers.max_pool(m, head.pool_size)
    u, conv_cache = layers.conv2d(t, head.conv_w, head.conv_b)
    u = u.reshape(B, N)
    target = np.zeros((B, N))
    target[np.arange(B), labels] = 1.0
    resid = target - u
    inv_var = np.exp(-2.0 * head.log_sigma)
    per = np.sum(head.log_sigma + 0.5 * resid**2 * inv_var, axis=1)
    cache = LayerCache("vi", pool=pool_cache, conv=conv_cache, resid=resid, inv_var=inv_var, B=B)
    return float(per.mean()), cache


def vi_loss_backward(cache: LayerCache, grad_out: float = 1.0):
    """Returns ``(grad_m, grad_conv_w, grad_conv_b, grad_log_sigma)``."""
    c = cache.take("vi")
    scale = grad_out / c.B
    grad_u = -c.resid * c.inv_var * scale
    grad_ls = np.sum(1.0 - c.resid**2 * c.inv_var, axis=0) * scale
    grad_t, grad_w, grad_b = layers.conv2d_backward(c.conv, grad_u[:, :, None, None])
    grad_m = layers.max_pool_backward(c.pool, grad_t)
    return grad_m, grad_w, grad_b, grad_ls


# ---------------------------------------------------------------------------
# correlation losses


def row_cosine(a, b) -> tuple[Tensor, LayerCache]:
    """Cosine similarity along the last axis; 0 for rows with norm below 1e-12."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    ok = (na >= COSINE_EPS) & (nb >= COSINE_EPS)
    na_s = np.where(ok, na, 1.0)
    nb_s = np.where(ok, nb, 1.0)
    cos = np.where(ok, np.sum(a * b, axis=-1) / (na_s * nb_s), 0.0)
    return cos, LayerCache("row_cosine", a=a, b=b, na=na_s, nb=nb_s, ok=ok, cos=cos)


def row_cosine_backward(cache: LayerCache, grad_cos) -> tuple[Tensor, Tensor]:
    c = cache.take("row_cosine")
    g = np.where(c.ok, grad_cos, 0.0)[..., None]
    na = c.na[..., None]
    nb = c.nb[..., None]
    cos = c.cos[..., None]
    ga = g * (c.b / (na * nb) - cos * c.a / na**2)
    gb = g * (c.a / (na * nb) - cos * c.b / nb**2)
    return ga, gb


def mean_row_cosine(a, b) -> float:
    """Correlation of two ``(K, C)`` feature matrices: mean per-row cosine."""
    cos, _ = row_cosine(a, b)
    return float(cos.mean())


def pixelwise_correlation_map(f_rgb, f_d) -> Tensor:
    """Cosine similarity of the channel vectors at every spatial position."""
    f_rgb = as_tensor(f_rgb)
    f_d = as_tensor(f_d)
    if f_rgb.shape != f_d.shape:
        raise ShapeMismatch(f"{f_rgb.shape} vs {f_d.shape}")
    cos, _ = row_cosine(np.moveaxis(f_rgb, -3, -1), np.moveaxis(f_d, -3, -1))
    return cos


def multimodal_corr_loss(e_rgb, e_d) -> tuple[float, LayerCache]:
    """``1 - mean_j cos(e_rgb[j], e_d[j])``, averaged over the batch."""
    e_rgb = as_tensor(e_rgb)
    cos, cc = row_cosine(e_rgb, e_d)
    cos2 = cos.reshape(-1, cos.shape[-1])
    loss = float(np.mean(1.0 - cos2.mean(axis=1)))
    return loss, LayerCache("corr_m", cos=cc, shape=cos.shape)


def multimodal_corr_loss_backward(cache: LayerCache, grad_out: float = 1.0) -> tuple[Tensor, Tensor]:
    c = cache.take("corr_m")
    count = int(np.prod(c.shape))
    g = np.full(c.shape, -grad_out / count)
    return row_cosine_backward(c.cos, g)


def triplet_corr_loss(e_a, e_p, e_n, alpha: float = DEFAULT_MARGIN) -> tuple[float, LayerCache]:
    """Hinge ``max(rho(a, n) - rho(a, p) + alpha, 0)``, averaged over triplets.

    ``rho`` is the mean per-row cosine, so same-class pairs are pulled
    together and different-class pairs pushed apart.
    """
    if alpha < 0:
        raise ValueError(f"margin must be >= 0, got {alpha}")
    e_a = as_tensor(e_a)
    if not (e_a.shape == np.shape(e_p) == np.shape(e_n)):
        raise ShapeMismatch(f"{e_a.shape}, {np.shape(e_p)}, {np.shape(e_n)}")
    cos_p, cp = row_cosine(e_a, e_p)
    cos_n, cn = row_cosine(e_a, e_n)
    rho_p = cos_p.mean(axis=-1)
    rho_n = cos_n.mean(axis=-1)
    hinge = rho_n - rho_p + alpha
    active = hinge > 0
    loss = float(np.mean(np.where(active, hinge, 0.0)))
    return loss, LayerCache("triplet", cp=cp, cn=cn, active=active, shape=cos_p.shape)


def triplet_corr_loss_backward(cache: LayerCache, grad_out: float = 1.0):
    """Returns ``(grad_a, grad_p, grad_n)``; subgradient 0 at and below the hinge."""
    c = cache.take("triplet")
    k = c.shape[-1]
    count = int(np.prod(c.shape[:-1])) if len(c.shape) > 1 else 1
    w = np.where(c.active, grad_out / (k * count), 0.0)[..., None]
    w = np.broadcast_to(w, c.shape)
    ga_n, gn = row_cosine_backward(c.cn, w)
    ga_p, gp = row_cosine_backward(c.cp, -w)
    return ga_n + ga_p, gp, gn


# ---------------------------------------------------------------------------
# auxiliary cross-entropy


def aux_ce_loss(g_rgb_logits, g_d_logits, label) -> tuple[float, LayerCache]:
    l1, c1 = layers.cross_entropy(g_rgb_logits, label)
    l2, c2 = layers.cross_entropy(g_d_logits, label)
    return l1 + l2, LayerCache("aux_ce", c1=c1, c2=c2)


def aux_ce_loss_backward(cache: LayerCache, grad_out: float = 1.0) -> tuple[Tensor, Tensor]:
    c = cache.take("aux_ce")
    return (
        layers.cross_entropy_backward(c.c1, grad_out),
        layers.cross_entropy_backward(c.c2, grad_out),
    )
