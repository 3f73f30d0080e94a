"""Dense float64 tensors, a counter-based RNG, and the DTEN file format.

Tensors are plain C-contiguous ``numpy.ndarray`` objects of dtype float64.
The helpers here only add the contracts the rest of the package leans on:
strict shape checking (no broadcasting beyond scalars), a degenerate-safe
cosine similarity, and a bit-exact binary serialization.

DTEN layout (little endian, no padding)::

    b"DTEN" | u32 version=1 | u8 dtype (1 = f64) | u8 rank | rank x u64 dims | f64 payload
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    AxisOutOfRange,
    BadMagic,
    BadParam,
    DtypeUnsupported,
    ShapeMismatch,
    TruncatedFile,
)

Tensor = np.ndarray

MAGIC = b"DTEN"
VERSION = 1
DTYPE_F64 = 1
_HEADER = struct.Struct("<4sIBB")

COSINE_EPS = 1e-12


def as_tensor(x) -> Tensor:
    # asarray keeps rank 0 (ascontiguousarray would promote it to rank 1)
    return np.asarray(x, dtype=np.float64, order="C")


def zeros(*shape: int) -> Tensor:
    return np.zeros(shape, dtype=np.float64)


def strides_of(shape: Sequence[int]) -> tuple[int, ...]:
    """Row-major element strides for ``shape``."""
    out = []
    acc = 1
    for d in reversed(shape):
        out.append(acc)
        acc *= d
    return tuple(reversed(out))


def flat_index(index: Sequence[int], shape: Sequence[int]) -> int:
    return sum(i * s for i, s in zip(index, strides_of(shape)))


# ---------------------------------------------------------------------------
# arithmetic


_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "scale": np.multiply,
}
_UNARY = {
    "relu": lambda a: np.maximum(a, 0.0),
    "max0": lambda a: np.maximum(a, 0.0),
    "abs": np.abs,
}


def elementwise(op: str, a, b=None) -> Tensor:
    a = as_tensor(a)
    if op in _UNARY:
        return _UNARY[op](a)
    if op not in _BINARY:
        raise BadParam(f"unknown elementwise op {op!r}")
    if np.ndim(b) == 0:
        return _BINARY[op](a, float(b))
    b = as_tensor(b)
    if b.shape != a.shape:
        raise ShapeMismatch(f"{op}: {a.shape} vs {b.shape}")
    return _BINARY[op](a, b)


def reduce(op: str, a, axis: int | None = None, return_indices: bool = False):
    """Sum, max or mean over one axis (or everything when ``axis`` is None).

    With ``op="max"`` and ``return_indices=True`` the argmax positions are
    returned alongside the values (first occurrence wins ties).
    """
    a = as_tensor(a)
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise AxisOutOfRange(f"axis {axis} for rank {a.ndim}")
    if op == "sum":
        return np.sum(a, axis=axis)
    if op == "mean":
        return np.mean(a, axis=axis)
    if op == "max":
        vals = np.max(a, axis=axis)
        if return_indices:
            return vals, np.argmax(a, axis=axis)
        return vals
    raise BadParam(f"unknown reduction {op!r}")


def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    return a @ b


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors; 0 if either norm is below 1e-12."""
    a = as_tensor(a).ravel()
    b = as_tensor(b).ravel()
    if a.shape != b.shape:
        raise ShapeMismatch(f"cosine {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < COSINE_EPS or nb < COSINE_EPS:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# ---------------------------------------------------------------------------
# DTEN I/O


def encode_tensor(t) -> bytes:
    t = as_tensor(t)
    if t.ndim > 255:
        raise BadParam("rank above 255")
    head = _HEADER.pack(MAGIC, VERSION, DTYPE_F64, t.ndim)
    dims = struct.pack(f"<{t.ndim}Q", *t.shape)
    return head + dims + t.astype("<f8", copy=False).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Parse one DTEN record at ``offset``; return the tensor and the end offset."""
    if len(buf) - offset < _HEADER.size:
        raise TruncatedFile("header cut short")
    magic, version, dtype, rank = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {magic!r}")
    if version != VERSION:
        raise BadMagic(f"unsupported DTEN version {version}")
    if dtype != DTYPE_F64:
        raise DtypeUnsupported(f"dtype code {dtype}")
    pos = offset + _HEADER.size
    if len(buf) - pos < 8 * rank:
        raise TruncatedFile("dims cut short")
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    nbytes = 8 * count
    if len(buf) - pos < nbytes:
        raise TruncatedFile(f"payload needs {nbytes} bytes, {len(buf) - pos} left")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=pos)
    return data.astype(np.float64).reshape(dims), pos + nbytes


def save_tensor(path, t) -> None:
    Path(path).write_bytes(encode_tensor(t))


def load_tensor(path) -> Tensor:
    buf = Path(path).read_bytes()
    t, end = decode_tensor(buf)
    if end != len(buf):
        raise BadMagic(f"{len(buf) - end} trailing bytes after record")
    return t


# ---------------------------------------------------------------------------
# RNG


class Rng:
    """Deterministic generator on top of NumPy's Philox-4x64 counter RNG.

    The 128-bit Philox key is ``seed + (stream << 64)``, so any (seed, stream)
    pair names an independent reproducible substream. Uniform draws use
    NumPy's 53-bit double conversion and normal draws its ziggurat sampler;
    both are platform independent.
    """

    def __init__(self, seed: int, stream: int = 0):
        if seed < 0 or stream < 0 or seed >= 2**64:
            raise BadParam("seed and stream must be non-negative, seed < 2**64")
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(np.random.Philox(key=self.seed + (self.stream << 64)))

    def substream(self, *path: int) -> "Rng":
        """Child generator keyed by this seed and a path of integers."""
        stream = self.stream
        for p in path:
            stream = (stream * 1_000_003 + int(p) + 1) % (2**63)
        return Rng(self.seed, stream)

    def uniform(self, lo: float, hi: float, shape=()) -> Tensor:
        if not lo <= hi:
            raise BadParam(f"uniform needs lo <= hi, got {lo}, {hi}")
        return self._gen.uniform(lo, hi, size=shape)

    def normal(self, mu: float, sigma: float, shape=()) -> Tensor:
        if sigma < 0:
            raise BadParam(f"normal needs sigma >= 0, got {sigma}")
        return self._gen.normal(mu, sigma, size=shape)

    def integers(self, lo: int, hi: int, shape=None):
        return self._gen.integers(lo, hi, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, items: Sequence[int]):
        return items[int(self._gen.integers(0, len(items)))]

    def draw(self, dist: str, *params: float, shape=()) -> Tensor:
        if dist == "uniform":
            return self.uniform(*params, shape=shape)
        if dist == "normal":
            return self.normal(*params, shape=shape)
        raise BadParam(f"unknown distribution {dist!r}")
