"""Binary PPM (P6) and PGM (P5) reading and writing, 8-bit only."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .tensor_core import _atomic_write

_HEADER = re.compile(rb"\A(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


class NetpbmError(ValueError):
    pass


def decode(payload: bytes) -> np.ndarray:
    """Return ``uint8`` pixels as ``(3, h, w)`` for P6 or ``(h, w)`` for P5."""
    m = _HEADER.match(payload)
    if not m:
        raise NetpbmError("not a binary PPM/PGM file")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise NetpbmError(f"only maxval 255 is supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    body = payload[m.end():]
    if len(body) != w * h * channels:
        raise NetpbmError(f"expected {w * h * channels} pixel bytes, found {len(body)}")
    pix = np.frombuffer(body, dtype=np.uint8)
    if channels == 1:
        return pix.reshape(h, w).copy()
    return pix.reshape(h, w, 3).transpose(2, 0, 1).copy()


def encode(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim == 2:
        h, w = pixels.shape
        return b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes()
    c, h, w = pixels.shape
    if c != 3:
        raise NetpbmError(f"PPM needs 3 channels, got {c}")
    return b"P6\n%d %d\n255\n" % (w, h) + pixels.transpose(1, 2, 0).tobytes()


def read_image(path) -> np.ndarray:
    """PPM as float64 ``(3, h, w)`` in [0, 1]."""
    pix = decode(Path(path).read_bytes())
    if pix.ndim != 3:
        raise NetpbmError(f"{path} is not a colour PPM")
    return pix.astype(np.float64) / 255.0


def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, img: np.ndarray) -> None:
    _atomic_write(Path(path), encode(to_bytes(img)))


def heatmap_pixels(weights: np.ndarray) -> np.ndarray:
    """Scale each row by its maximum into 0..255."""
    peak = weights.max(axis=1, keepdims=True)
    scaled = np.divide(weights, peak, out=np.zeros_like(weights), where=peak > 0)
    return np.rint(np.clip(scaled, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_heatmap(path, weights: np.ndarray) -> None:
    _atomic_write(Path(path), encode(heatmap_pixels(weights)))
