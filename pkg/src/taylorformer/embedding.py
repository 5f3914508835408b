"""Multi-scale patch embedding from depthwise separable deformable convolutions (DSDCN).

A DSDCN layer predicts one offset field (2 K^2 maps, shared by all channels)
with a depthwise + pointwise head, clamps it to ``[-B, B]``, samples each
channel at the displaced kernel taps, applies a depthwise kernel and finally
mixes channels with a 1x1 convolution.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .layers import depthwise_conv2d, hardswish, pointwise_conv
from .tensor_core import ShapeError, bilinear_sample_grid, check_finite

U63 = 2**63


@dataclass
class DeformableEmbedConfig:
    in_channels: int
    out_channels: int
    kernel: int = 3
    depth: int = 1
    offset_bound: float | None = 3.0  # None disables truncation
    stride: int = 1

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be odd")
        if self.stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.offset_bound is not None and self.offset_bound < 0:
            raise ValueError("offset_bound must be >= 0")

    def layer(self, index: int) -> "DeformableEmbedConfig":
        """Config of the ``index``-th stacked layer: stride and channel change happen on the first."""
        if index == 0:
            return DeformableEmbedConfig(self.in_channels, self.out_channels, self.kernel, 1, self.offset_bound,
                                         self.stride)
        return DeformableEmbedConfig(self.out_channels, self.out_channels, self.kernel, 1, self.offset_bound, 1)


def branch_configs(in_channels: int, out_channels: int, num_branches: int, kernel: int = 3,
                   offset_bound: float | None = 3.0, stride: int = 1) -> list[DeformableEmbedConfig]:
    """Branch ``i`` stacks ``i + 1`` layers."""
    return [DeformableEmbedConfig(in_channels, out_channels, kernel, i + 1, offset_bound, stride)
            for i in range(num_branches)]


@dataclass
class DsdcnWeights:
    offset_dw: np.ndarray  # (C_in, K, K)
    offset_dw_bias: np.ndarray  # (C_in,)
    offset_pw: np.ndarray  # (2K^2, C_in)
    offset_pw_bias: np.ndarray  # (2K^2,)
    value_dw: np.ndarray  # (C_in, K, K), applied at the deformed taps
    value_dw_bias: np.ndarray  # (C_in,)
    value_pw: np.ndarray  # (C_out, C_in)
    value_pw_bias: np.ndarray  # (C_out,)

    def __post_init__(self):
        k2 = self.value_dw.shape[1] * self.value_dw.shape[2]
        if self.offset_pw.shape[0] != 2 * k2:
            raise ShapeError(f"offset head emits {self.offset_pw.shape[0]} maps, expected {2 * k2}")

    @staticmethod
    def shapes(cfg: DeformableEmbedConfig) -> dict[str, tuple[int, ...]]:
        c, o, k = cfg.in_channels, cfg.out_channels, cfg.kernel
        return {
            "offset_dw": (c, k, k), "offset_dw_bias": (c,),
            "offset_pw": (2 * k * k, c), "offset_pw_bias": (2 * k * k,),
            "value_dw": (c, k, k), "value_dw_bias": (c,),
            "value_pw": (o, c), "value_pw_bias": (o,),
        }

    @classmethod
    def init(cls, rng: np.random.Generator, cfg: DeformableEmbedConfig, std: float = 0.02,
             offset_std: float = 0.0) -> "DsdcnWeights":
        """Random value path; the offset head is zero unless ``offset_std`` > 0."""
        arrays = {}
        for name, shape in cls.shapes(cfg).items():
            if name.endswith("bias"):
                arrays[name] = np.zeros(shape)
            elif name.startswith("offset"):
                arrays[name] = rng.normal(0, offset_std, shape) if offset_std else np.zeros(shape)
            else:
                arrays[name] = rng.normal(0, std, shape)
        return cls(**arrays)

    @classmethod
    def delta(cls, channels: int, kernel: int = 3) -> "DsdcnWeights":
        """Zero offsets, centre-tap depthwise kernel, identity mixing: the layer is the identity."""
        cfg = DeformableEmbedConfig(channels, channels, kernel)
        arrays = {name: np.zeros(shape) for name, shape in cls.shapes(cfg).items()}
        arrays["value_dw"][:, kernel // 2, kernel // 2] = 1.0
        arrays["value_pw"] = np.eye(channels)
        return cls(**arrays)


def compute_offsets(x: np.ndarray, w: DsdcnWeights, cfg: DeformableEmbedConfig) -> np.ndarray:
    """Offset field ``(2K^2, h', w')`` after clamping; channel ``2t`` is dy and ``2t+1`` is dx of tap t."""
    feat = depthwise_conv2d(x, w.offset_dw, w.offset_dw_bias, stride=cfg.stride)
    off = pointwise_conv(feat, w.offset_pw, w.offset_pw_bias)
    if cfg.offset_bound is not None:
        off = np.clip(off, -cfg.offset_bound, cfg.offset_bound)
    return off


def dsdcn_forward(x: np.ndarray, w: DsdcnWeights, cfg: DeformableEmbedConfig, record: list | None = None) -> np.ndarray:
    """One DSDCN layer.  If ``record`` is a list, the sampling positions of every tap are
    appended to it as ``(tap_dy, tap_dx, ys, xs)`` tuples."""
    c, h, wd = x.shape
    if c != cfg.in_channels or w.value_dw.shape != (c, cfg.kernel, cfg.kernel):
        raise ShapeError(f"input {x.shape} / weights do not match config {cfg}")
    check_finite(x, "x")
    k, st = cfg.kernel, cfg.stride
    off = compute_offsets(x, w, cfg)
    ho, wo = off.shape[1:]
    gy, gx = np.meshgrid(np.arange(ho) * st, np.arange(wo) * st, indexing="ij")
    acc = np.zeros((c, ho, wo))
    r = k // 2
    for t in range(k * k):
        a, b = divmod(t, k)
        ys = gy + (a - r) + off[2 * t]
        xs = gx + (b - r) + off[2 * t + 1]
        if record is not None:
            record.append((a - r, b - r, ys, xs))
        acc += w.value_dw[:, a, b][:, None, None] * bilinear_sample_grid(x, ys, xs)
    acc += w.value_dw_bias[:, None, None]
    return pointwise_conv(acc, w.value_pw, w.value_pw_bias)


def separable_conv_reference(x: np.ndarray, w: DsdcnWeights, cfg: DeformableEmbedConfig) -> np.ndarray:
    """Plain depthwise + pointwise convolution with the value weights of ``w``."""
    y = depthwise_conv2d(x, w.value_dw, w.value_dw_bias, stride=cfg.stride)
    return pointwise_conv(y, w.value_pw, w.value_pw_bias)


def embed_branch(x: np.ndarray, layers: Sequence[DsdcnWeights], cfg: DeformableEmbedConfig) -> np.ndarray:
    if len(layers) != cfg.depth:
        raise ValueError(f"branch has depth {cfg.depth} but {len(layers)} layer weights")
    for i, lw in enumerate(layers):
        x = hardswish(dsdcn_forward(x, lw, cfg.layer(i)))
    return x


def multi_scale_patch_embed(x: np.ndarray, branch_cfgs: Sequence[DeformableEmbedConfig],
                            branch_weights: Sequence[Sequence[DsdcnWeights]]) -> list[np.ndarray]:
    """Run every branch on ``x``; each DSDCN layer is followed by Hardswish."""
    if not branch_cfgs:
        raise ValueError("need at least one branch")
    depths = [c.depth for c in branch_cfgs]
    if any(b <= a for a, b in zip(depths, depths[1:])):
        raise ValueError(f"branch depths must increase strictly, got {depths}")
    outs = [embed_branch(x, lw, cfg) for cfg, lw in zip(branch_cfgs, branch_weights, strict=True)]
    spatial = {o.shape[1:] for o in outs}
    if len(spatial) != 1:
        raise ShapeError(f"branch outputs disagree on spatial size: {sorted(spatial)}")
    return outs


def _checked(value: int) -> int:
    if value >= U63:
        raise OverflowError(f"MAC count {value} exceeds 63 bits")
    return value


def _check_positive(*args):
    if any(int(a) != a or a <= 0 for a in args):
        raise ValueError(f"arguments must be positive integers: {args}")


def dcn_macs(channels: int, kernel: int, h: int, w: int) -> int:
    """2 D K^4 hw + D^2 K^2 hw + 4 D K^2 hw."""
    _check_positive(channels, kernel, h, w)
    d, k, hw = channels, kernel, h * w
    return _checked(2 * d * k**4 * hw + d * d * k * k * hw + 4 * d * k * k * hw)


def dsdcn_macs(channels: int, kernel: int, h: int, w: int) -> int:
    """8 D K^2 hw + D^2 hw."""
    _check_positive(channels, kernel, h, w)
    d, k, hw = channels, kernel, h * w
    return _checked(8 * d * k * k * hw + d * d * hw)
