"""Neural layers with explicit forward/backward pairs.

Every ``forward`` returns ``(output, cache)`` and the matching ``*_backward``
takes that cache plus the upstream gradient. A cache can be consumed once;
reusing it raises :class:`StaleCache`.

Spatial layers accept a single sample ``(C, H, W)`` or a batch
``(B, C, H, W)``; the output keeps the input's batching.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    BadHyperparam,
    BadOutputSize,
    KernelTooLarge,
    LabelOutOfRange,
    ShapeMismatch,
    StaleCache,
)
from .tensor import Tensor, as_tensor


class LayerCache:
    """Values saved by a forward pass for its backward pass."""

    def __init__(self, kind: str, **saved):
        self.kind = kind
        self.spent = False
        self.__dict__.update(saved)

    def take(self, kind: str) -> "LayerCache":
        if self.kind != kind:
            raise StaleCache(f"cache from {self.kind!r} given to {kind!r} backward")
        if self.spent:
            raise StaleCache(f"{kind} cache already consumed")
        self.spent = True
        return self


@dataclass
class ParamTensor:
    value: Tensor
    grad: Tensor = field(default=None)
    adam_m: Tensor = field(default=None)
    adam_v: Tensor = field(default=None)
    step_count: int = 0

    def __post_init__(self):
        self.value = as_tensor(self.value)
        for name in ("grad", "adam_m", "adam_v"):
            cur = getattr(self, name)
            if cur is None:
                setattr(self, name, np.zeros_like(self.value))
            elif np.shape(cur) != self.value.shape:
                raise ShapeMismatch(f"{name} shape {np.shape(cur)} != {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def _batched(x: Tensor, rank: int) -> tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == rank - 1:
        return x[None], True
    if x.ndim != rank:
        raise ShapeMismatch(f"expected rank {rank - 1} or {rank}, got shape {x.shape}")
    return x, False


# ---------------------------------------------------------------------------
# activations


def relu(x) -> tuple[Tensor, LayerCache]:
    x = as_tensor(x)
    return np.maximum(x, 0.0), LayerCache("relu", mask=x > 0)


def relu_backward(cache: LayerCache, grad_out) -> Tensor:
    c = cache.take("relu")
    return np.where(c.mask, grad_out, 0.0)


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, w, b, stride: int = 1, padding: int = 0) -> tuple[Tensor, LayerCache]:
    """2-D cross-correlation with zero padding (im2col + one matrix product)."""
    x, single = _batched(x, 4)
    w = as_tensor(w)
    b = as_tensor(b)
    B, C, H, W = x.shape
    O, Cw, k, k2 = w.shape
    if Cw != C or k != k2 or b.shape != (O,):
        raise ShapeMismatch(f"conv weights {w.shape}/{b.shape} for input channels {C}")
    if stride < 1:
        raise KernelTooLarge(f"stride must be >= 1, got {stride}")
    if H + 2 * padding < k or W + 2 * padding < k:
        raise KernelTooLarge(f"kernel {k} over padded input {H}x{W} (pad {padding})")
    Ho = conv_output_size(H, k, stride, padding)
    Wo = conv_output_size(W, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    # rows: (b, i, j); columns: (c, ki, kj)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    w2 = w.reshape(O, C * k * k)
    out = (cols @ w2.T + b).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    cache = LayerCache(
        "conv2d", cols=cols, w=w, x_shape=x.shape, out_hw=(Ho, Wo), stride=stride, padding=padding, single=single
    )
    return (out[0] if single else out), cache


def conv2d_backward(cache: LayerCache, grad_out, input_grad: bool = True) -> tuple[Tensor, Tensor, Tensor]:
    """Returns ``(grad_x, grad_w, grad_b)``; ``grad_x`` is None when ``input_grad`` is False."""
    c = cache.take("conv2d")
    g, _ = _batched(grad_out, 4)
    B, C, H, W = c.x_shape
    O, _, k, _ = c.w.shape
    s, p = c.stride, c.padding
    Ho, Wo = c.out_hw
    if g.shape != (B, O, Ho, Wo):
        raise ShapeMismatch(f"grad_out {g.shape} != output {(B, O, Ho, Wo)}")
    g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
    grad_w = (g2.T @ c.cols).reshape(c.w.shape)
    grad_b = g2.sum(axis=0)
    if not input_grad:
        return None, grad_w, grad_b
    dcols = (g2 @ c.w.reshape(O, -1)).reshape(B, Ho, Wo, C, k, k)
    gxp = np.zeros((B, H + 2 * p, W + 2 * p, C))
    for i in range(k):
        for j in range(k):
            gxp[:, i : i + s * Ho : s, j : j + s * Wo : s, :] += dcols[:, :, :, :, i, j]
    grad_x = gxp[:, p : p + H, p : p + W, :] if p else gxp
    grad_x = np.ascontiguousarray(grad_x.transpose(0, 3, 1, 2))
    return (grad_x[0] if c.single else grad_x), grad_w, grad_b


# ---------------------------------------------------------------------------
# dense


def fully_connected(x, w, b) -> tuple[Tensor, LayerCache]:
    """Affine map ``w @ x + b`` over the last axis of ``x``."""
    x = as_tensor(x)
    w = as_tensor(w)
    b = as_tensor(b)
    if w.ndim != 2 or x.shape[-1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeMismatch(f"fc x{x.shape} w{w.shape} b{b.shape}")
    return x @ w.T + b, LayerCache("fc", x=x, w=w)


def fully_connected_backward(cache: LayerCache, grad_out) -> tuple[Tensor, Tensor, Tensor]:
    c = cache.take("fc")
    g = as_tensor(grad_out)
    if g.shape != c.x.shape[:-1] + (c.w.shape[0],):
        raise ShapeMismatch(f"fc grad_out {g.shape}")
    grad_x = g @ c.w
    g2 = g.reshape(-1, g.shape[-1])
    grad_w = g2.T @ c.x.reshape(-1, c.x.shape[-1])
    return grad_x, grad_w, g2.sum(axis=0)


# ---------------------------------------------------------------------------
# pooling


def global_avg_pool(x) -> tuple[Tensor, LayerCache]:
    x, single = _batched(x, 4)
    out = x.mean(axis=(2, 3))
    cache = LayerCache("gap", shape=x.shape, single=single)
    return (out[0] if single else out), cache


def global_avg_pool_backward(cache: LayerCache, grad_out) -> Tensor:
    c = cache.take("gap")
    g, _ = _batched(grad_out, 2)
    B, C, H, W = c.shape
    if g.shape != (B, C):
        raise ShapeMismatch(f"gap grad_out {g.shape}")
    gx = np.broadcast_to((g / (H * W))[:, :, None, None], c.shape).copy()
    return gx[0] if c.single else gx


def _cell_bounds(n: int, s: int) -> list[tuple[int, int]]:
    return [(i * n // s, (i + 1) * n // s) for i in range(s)]


def max_pool(x, out_size: int) -> tuple[Tensor, LayerCache]:
    """Adaptive max pooling onto an ``out_size`` x ``out_size`` grid.

    Cell ``i`` spans rows ``floor(i*H/S)`` to ``floor((i+1)*H/S)``. Ties go to
    the first position in row-major order inside the cell.
    """
    x, single = _batched(x, 4)
    B, C, H, W = x.shape
    S = int(out_size)
    if S < 1 or S > min(H, W):
        raise BadOutputSize(f"pool size {S} for {H}x{W} input")
    if H % S == 0 and W % S == 0:
        # equal cells: scan the h*w strided sub-grids, strict > keeps the first max
        h, w = H // S, W // S
        out = x[:, :, 0::h, 0::w].copy()
        arg = np.zeros((B, C, S, S), dtype=np.int64)
        for idx in range(1, h * w):
            view = x[:, :, idx // w :: h, idx % w :: w]
            better = view > out
            out = np.where(better, view, out)
            arg[better] = idx
        cache = LayerCache("max_pool", shape=x.shape, out_shape=out.shape, cell=(h, w), arg=arg, single=single)
        return (out[0] if single else out), cache
    out = np.empty((B, C, S, S))
    flat = np.empty((B, C, S, S), dtype=np.int64)
    for i, (r0, r1) in enumerate(_cell_bounds(H, S)):
        for j, (c0, c1) in enumerate(_cell_bounds(W, S)):
            cell = x[:, :, r0:r1, c0:c1].reshape(B, C, -1)
            a = cell.argmax(axis=-1)
            out[:, :, i, j] = np.take_along_axis(cell, a[..., None], axis=-1)[..., 0]
            flat[:, :, i, j] = (r0 + a // (c1 - c0)) * W + c0 + a % (c1 - c0)
    cache = LayerCache("max_pool", shape=x.shape, out_shape=out.shape, cell=None, flat=flat, single=single)
    return (out[0] if single else out), cache


def max_pool_backward(cache: LayerCache, grad_out) -> Tensor:
    c = cache.take("max_pool")
    g, _ = _batched(grad_out, 4)
    B, C, H, W = c.shape
    if g.shape != c.out_shape:
        raise ShapeMismatch(f"max_pool grad_out {g.shape} != {c.out_shape}")
    if c.cell is not None:
        h, w = c.cell
        gx = np.zeros((B, C, H, W))
        for idx in range(h * w):
            gx[:, :, idx // w :: h, idx % w :: w] = np.where(c.arg == idx, g, 0.0)
        return gx[0] if c.single else gx
    gx = np.zeros((B, C, H * W))
    bi = np.arange(B)[:, None, None, None]
    ci = np.arange(C)[None, :, None, None]
    np.add.at(gx, (bi, ci, c.flat), g)
    gx = gx.reshape(B, C, H, W)
    return gx[0] if c.single else gx


# ---------------------------------------------------------------------------
# softmax family


def softmax2d(m) -> tuple[Tensor, LayerCache]:
    """Softmax over the last two axes (each H x W map sums to one)."""
    m = as_tensor(m)
    z = m - m.max(axis=(-2, -1), keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=(-2, -1), keepdims=True)
    return out, LayerCache("softmax2d", out=out)


def softmax2d_backward(cache: LayerCache, grad_out) -> Tensor:
    c = cache.take("softmax2d")
    g = as_tensor(grad_out)
    if g.shape != c.out.shape:
        raise ShapeMismatch(f"softmax2d grad_out {g.shape}")
    s = c.out
    return s * (g - (g * s).sum(axis=(-2, -1), keepdims=True))


def softmax(z) -> Tensor:
    z = as_tensor(z)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, label) -> tuple[float, LayerCache]:
    """Mean of ``-log softmax(logits)[label]`` over the batch.

    ``logits`` is ``(N,)`` with an int label, or ``(B, N)`` with ``B`` labels.
    """
    z = as_tensor(logits)
    single = z.ndim == 1
    z2 = z[None] if single else z
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    N = z2.shape[1]
    if labels.shape != (z2.shape[0],):
        raise ShapeMismatch(f"{labels.shape[0]} labels for {z2.shape[0]} logit rows")
    if np.any(labels < 0) or np.any(labels >= N):
        raise LabelOutOfRange(f"labels {labels.tolist()} outside [0, {N})")
    zs = z2 - z2.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1))
    rows = np.arange(len(labels))
    losses = lse - zs[rows, labels]
    probs = np.exp(zs - lse[:, None])
    cache = LayerCache("cross_entropy", probs=probs, labels=labels, single=single)
    return float(losses.mean()), cache


def cross_entropy_backward(cache: LayerCache, grad_out: float = 1.0) -> Tensor:
    c = cache.take("cross_entropy")
    g = c.probs.copy()
    g[np.arange(len(c.labels)), c.labels] -= 1.0
    g *= grad_out / len(c.labels)
    return g[0] if c.single else g


# ---------------------------------------------------------------------------
# optimizer


def adam_step(
    p: ParamTensor, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
) -> ParamTensor:
    """One bias-corrected Adam update of ``p`` in place (also returned).

    ``lr == 0`` is allowed and leaves ``value`` untouched while still
    advancing the moment estimates.
    """
    if lr < 0 or not (0 <= beta1 < 1) or not (0 <= beta2 < 1) or eps <= 0:
        raise BadHyperparam(f"lr={lr} beta1={beta1} beta2={beta2} eps={eps}")
    g = p.grad
    p.step_count += 1
    t = p.step_count
    p.adam_m *= beta1
    p.adam_m += (1.0 - beta1) * g
    p.adam_v *= beta2
    p.adam_v += (1.0 - beta2) * g * g
    if lr:
        m_hat = p.adam_m / (1.0 - beta1**t)
        v_hat = p.adam_v / (1.0 - beta2**t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return p
