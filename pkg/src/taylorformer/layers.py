"""Convolution and activation primitives on ``(C, H, W)`` float64 arrays."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad)))


def depthwise_conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None, stride: int = 1) -> np.ndarray:
    """Per-channel ``k x k`` correlation, zero padding ``k // 2``."""
    c, h, w = x.shape
    if weight.shape[0] != c or weight.shape[1] != weight.shape[2] or weight.shape[1] % 2 == 0:
        raise ValueError(f"depthwise weight {weight.shape} does not fit input {x.shape}")
    k = weight.shape[1]
    r = k // 2
    xp = _pad(x, r)
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    out = np.zeros((c, ho, wo))
    for a in range(k):
        for b in range(k):
            patch = xp[:, a : a + stride * (ho - 1) + 1 : stride, b : b + stride * (wo - 1) + 1 : stride]
            out += weight[:, a, b][:, None, None] * patch
    if bias is not None:
        out += bias[:, None, None]
    return out


def pointwise_conv(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """1x1 convolution; ``weight`` has shape ``(C_out, C_in)``."""
    c, h, w = x.shape
    out = (weight @ x.reshape(c, h * w)).reshape(weight.shape[0], h, w)
    if bias is not None:
        out += bias[:, None, None]
    return out


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Dense stride-1 'same' convolution; ``weight`` is ``(C_out, C_in, k, k)``."""
    k = weight.shape[-1]
    if weight.shape[1] != x.shape[0]:
        raise ValueError(f"conv weight {weight.shape} does not fit input {x.shape}")
    cols = sliding_window_view(_pad(x, k // 2), (k, k), axis=(1, 2))  # C, H, W, k, k
    out = np.einsum("chwab,ocab->ohw", cols, weight, optimize=True)
    if bias is not None:
        out += bias[:, None, None]
    return out


def hardswish(x: np.ndarray) -> np.ndarray:
    return x * np.clip(x + 3.0, 0.0, 6.0) / 6.0


def gelu(x: np.ndarray) -> np.ndarray:
    from scipy.special import erf

    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def leaky_relu(x: np.ndarray, slope: float = 0.2) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def layer_norm(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None, eps: float = 1e-5) -> np.ndarray:
    """Normalise across channels at every pixel.  ``bias=None`` gives the bias-free variant,
    which also skips mean subtraction."""
    var = x.var(axis=0, keepdims=True)
    if bias is None:
        return x / np.sqrt(var + eps) * weight[:, None, None]
    mu = x.mean(axis=0, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * weight[:, None, None] + bias[:, None, None]
