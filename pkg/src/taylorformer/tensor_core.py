"""Dense float64 numerics shared by every other module.

Tensors are plain ``numpy.ndarray`` objects in C (row-major) order.  The
helpers here add the shape and finiteness checks the rest of the package
relies on, plus the raw ``TTNSR1`` file container.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"TTNSR1"
DEFAULT_RANK_TOL = 1e-8


class NonFiniteError(ValueError):
    """Raised when a NaN or Inf reaches a public operation."""


class ShapeError(ValueError):
    pass


def check_finite(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return x


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    return check_finite(arr, name)


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator (numpy PCG64).  Same seed, same stream."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal samples redrawn until they fall within ``bound`` standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} x {b.shape}")
    check_finite(a, "a")
    check_finite(b, "b")
    return a @ b


def row_norms(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", x, x))


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Scale each row to unit Euclidean norm; all-zero rows stay zero."""
    norms = row_norms(x)
    safe = np.where(norms > 0, norms, 1.0)
    return x / safe[:, None]


def rank_estimate(m: np.ndarray, tol: float = DEFAULT_RANK_TOL) -> int:
    """Number of singular values above ``tol`` times the largest one."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    check_finite(m, "matrix")
    sv = np.linalg.svd(np.atleast_2d(m), compute_uv=False)
    if sv.size == 0 or sv[0] == 0:
        return 0
    return int(np.count_nonzero(sv > tol * sv[0]))


def bilinear_sample(feature: np.ndarray, y: float, x: float, channel: int) -> float:
    """Bilinear interpolation of ``feature[channel]`` at ``(y, x)`` with zero padding."""
    if not 0 <= channel < feature.shape[0]:
        raise IndexError(f"channel {channel} out of range for {feature.shape[0]} channels")
    return float(bilinear_sample_grid(feature[channel : channel + 1], np.array(y), np.array(x))[0])


def bilinear_sample_grid(feature: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample every channel of a ``(C, H, W)`` map at arrays of fractional positions.

    Returns an array of shape ``(C,) + ys.shape``.  Neighbours that fall
    outside the map contribute zero.
    """
    c, hgt, wid = feature.shape
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    wy1 = ys - y0
    wx1 = xs - x0
    wy0 = 1.0 - wy1
    wx0 = 1.0 - wx1
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    out = np.zeros((c,) + np.shape(ys))
    for dy, wy in ((0, wy0), (1, wy1)):
        yi = y0 + dy
        for dx, wx in ((0, wx0), (1, wx1)):
            xi = x0 + dx
            valid = (yi >= 0) & (yi < hgt) & (xi >= 0) & (xi < wid)
            vals = feature[:, np.clip(yi, 0, hgt - 1), np.clip(xi, 0, wid - 1)]
            out += np.where(valid, wy * wx, 0.0) * vals
    return out


# ---------------------------------------------------------------------------
# raw tensor container


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_raw(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    header = MAGIC + struct.pack("<Q", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.astype("<f8").tobytes(order="C")


def decode_raw(payload: bytes) -> np.ndarray:
    if payload[:6] != MAGIC:
        raise ValueError("not a TTNSR1 tensor file")
    (rank,) = struct.unpack_from("<Q", payload, 6)
    shape = struct.unpack_from(f"<{rank}Q", payload, 14)
    offset = 14 + 8 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(payload) - offset != 8 * count:
        raise ValueError(f"payload size does not match shape {shape}")
    return np.frombuffer(payload, dtype="<f8", offset=offset).astype(np.float64).reshape(shape)


def save_raw(path, arr: np.ndarray) -> None:
    _atomic_write(Path(path), encode_raw(arr))


def load_raw(path) -> np.ndarray:
    return decode_raw(Path(path).read_bytes())


def save_checkpoint(directory, params: Mapping[str, np.ndarray], roles: Mapping[str, str] | None = None) -> None:
    """Write one raw file per parameter plus a ``manifest.json`` of names, roles and shapes."""
    directory = Path(directory)
    roles = roles or {}
    entries = []
    for i, (name, arr) in enumerate(params.items()):
        fname = f"{i:04d}.ttnsr"
        save_raw(directory / fname, arr)
        entries.append({"name": name, "file": fname, "shape": list(np.shape(arr)), "role": roles.get(name, "")})
    _atomic_write(directory / "manifest.json", json.dumps({"params": entries}, indent=1).encode())


def load_checkpoint(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    params = {}
    for entry in manifest["params"]:
        arr = load_raw(directory / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise ValueError(f"{entry['name']}: manifest shape {entry['shape']} != file shape {arr.shape}")
        params[entry["name"]] = arr
    return params
