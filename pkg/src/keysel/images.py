"""Binary PGM (P5) / PPM (P6) output for correlation maps and keypoint overlays.

Files are ``P5\\n<W> <H>\\n255\\n`` (or ``P6``) followed by the raw
row-major bytes, three per pixel for PPM. Nothing else is written, so
outputs are bit-reproducible.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import BadMagic, ShapeMismatch, TruncatedFile

SCALE_LEVELS = (255, 0, 128, 64, 192)  # marker gray level per pyramid scale
CONSTANT_LEVEL = 128


def encode_pnm(img: np.ndarray) -> bytes:
    """``(H, W)`` uint8 -> P5 bytes; ``(H, W, 3)`` uint8 -> P6 bytes."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise TypeError(f"expected uint8 pixels, got {img.dtype}")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ShapeMismatch(f"image must be (H, W) or (H, W, 3), got {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def decode_pnm(buf: bytes) -> np.ndarray:
    """Parse exactly the layout :func:`encode_pnm` writes."""
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise BadMagic(f"not a binary PGM/PPM: {magic!r}")
    parts = buf.split(b"\n", 3)
    if len(parts) < 4:
        raise TruncatedFile("incomplete header")
    _, dims, maxval, payload = parts
    try:
        w, h = (int(v) for v in dims.split(b" "))
    except ValueError:
        raise BadMagic(f"bad dimensions line {dims!r}") from None
    if maxval != b"255":
        raise BadMagic(f"unsupported maxval {maxval!r}")
    depth = 1 if magic == b"P5" else 3
    need = w * h * depth
    if len(payload) < need:
        raise TruncatedFile(f"{len(payload)} of {need} pixel bytes")
    if len(payload) > need:
        raise BadMagic("trailing bytes after pixel data")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape((h, w) if depth == 1 else (h, w, 3)).copy()


def write_pnm(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_pnm(img))


def read_pnm(path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes())


def normalize_map(m) -> np.ndarray:
    """Min-max scale to 0..255 (rounded); a constant map becomes uniform 128."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = float(m.min()), float(m.max())
    if hi == lo:
        return np.full(m.shape, CONSTANT_LEVEL, dtype=np.uint8)
    return np.rint(255.0 * (m - lo) / (hi - lo)).astype(np.uint8)


def upsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour block upsampling of the two leading axes."""
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


def correlation_image(corr_map, stride: int = 1) -> np.ndarray:
    return upsample(normalize_map(corr_map), stride)


def to_rgb8(x) -> np.ndarray:
    """``(3, H, W)`` floats in [0, 1] -> ``(H, W, 3)`` uint8."""
    x = np.asarray(x, dtype=np.float64)
    return np.rint(255.0 * np.clip(np.moveaxis(x, 0, -1), 0.0, 1.0)).astype(np.uint8)


def draw_cross(img: np.ndarray, row: float, col: float, level: int) -> None:
    """3x3 plus-shaped marker centered on the nearest pixel, clipped at borders."""
    h, w = img.shape[:2]
    r, c = int(np.rint(row)), int(np.rint(col))
    for dr, dc in ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)):
        rr, cc = r + dr, c + dc
        if 0 <= rr < h and 0 <= cc < w:
            img[rr, cc] = level


def keypoint_overlay(x, keypoints_px_per_scale) -> np.ndarray:
    """Input image with a cross per keypoint; scale ``s`` uses gray ``SCALE_LEVELS[s]``."""
    img = to_rgb8(x)
    for s, pts in enumerate(keypoints_px_per_scale):
        level = SCALE_LEVELS[s % len(SCALE_LEVELS)]
        for row, col in np.asarray(pts).reshape(-1, 2):
            draw_cross(img, row, col, level)
    return img
