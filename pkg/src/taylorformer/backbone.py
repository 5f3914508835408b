"""Multi-branch four-stage encoder-decoder restoration network.

Parameters live in one flat ``dict[str, ndarray]`` keyed by dotted names
(``stage3.b1.block0.attn.qkv`` ...), which is also the checkpoint layout.
:func:`param_shapes` enumerates them from a :class:`ModelConfig` without
allocating anything.
"""
from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import attention as attn
from .embedding import DeformableEmbedConfig, DsdcnWeights, embed_branch
from .layers import conv2d, depthwise_conv2d, gelu, layer_norm, leaky_relu, pointwise_conv
from .tensor_core import ShapeError, check_finite, load_checkpoint, make_rng, save_checkpoint, trunc_normal

Params = dict[str, np.ndarray]

NUM_STAGES = 8


@dataclass
class ModelConfig:
    branches: list[int]
    blocks: list[int]
    channels: list[int]
    head_channels: int = 24
    focused_factor: float = 4.0
    modulation: float = 0.5
    offset_bound: float | None = 3.0
    embed_kernel: int = 3
    cpe_kernels: tuple[int, ...] = (3, 5)
    ffn_kernels: tuple[int, ...] = (3, 5)
    skff_reduction: int = 8
    bias_free_norm: bool = False
    in_channels: int = 3

    def __post_init__(self):
        for name in ("branches", "blocks", "channels"):
            vals = list(getattr(self, name))
            if len(vals) != NUM_STAGES:
                raise ValueError(f"{name} needs {NUM_STAGES} entries, got {len(vals)}")
            if any(v < 1 for v in vals):
                raise ValueError(f"{name} entries must be positive")
            setattr(self, name, vals)
        c = self.channels
        if (c[4], c[5], c[6], c[7]) != (c[2], c[1], c[0], c[6]):
            raise ValueError(f"decoder channels must mirror the encoder: {c}")
        for i in (1, 2, 3):
            if c[i] % 4:
                raise ValueError(f"stage {i} channels {c[i]} must be divisible by 4 for pixel-unshuffle")
        self.cpe_kernels = tuple(self.cpe_kernels)
        self.ffn_kernels = tuple(self.ffn_kernels)

    # widths actually carried by each stage; the first-level decoder keeps the
    # concatenated skip without a 1x1 reduction, so it and the refinement
    # stage run at channels[6] + channels[0]
    def stage_widths(self) -> list[int]:
        c = self.channels
        return c[:6] + [c[6] + c[0], c[7] + c[0]]

    def heads(self, width: int) -> int:
        h = max(width // self.head_channels, 1)
        while width % h:
            h -= 1
        return h

    def attention_config(self, width: int, modulation: float | None = None) -> attn.AttentionConfig:
        h = self.heads(width)
        return attn.AttentionConfig(heads=h, head_dim=width // h, focused_factor=self.focused_factor,
                                    modulation=self.modulation if modulation is None else modulation,
                                    cpe_kernels=self.cpe_kernels)

    @classmethod
    def nano(cls) -> "ModelConfig":
        return cls(branches=[2] * 8, blocks=[1] * 8, channels=[8, 16, 24, 32, 24, 16, 8, 8], head_channels=8)

    @classmethod
    def variant(cls, name: str) -> "ModelConfig":
        table = {
            "B": ([2, 2, 2, 2, 2, 2, 2, 2], [2, 3, 3, 4, 3, 3, 2, 2], [24, 48, 72, 96, 72, 48, 24, 24]),
            "L": ([2, 3, 3, 3, 3, 3, 2, 2], [4, 6, 6, 8, 6, 6, 4, 4], [24, 48, 72, 96, 72, 48, 24, 24]),
            "XL": ([2, 3, 3, 3, 3, 3, 2, 2], [4, 6, 6, 8, 6, 6, 4, 4], [28, 56, 112, 160, 112, 56, 28, 28]),
        }
        if name == "nano":
            return cls.nano()
        b, k, c = table[name]
        return cls(branches=b, blocks=k, channels=c)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, (list, tuple)):
                val = ",".join(str(v) for v in val)
            elif val is None:
                val = "none"
            lines.append(f"{f.name} = {val}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = (s.strip() for s in line.partition("="))
            if not sep or key not in kinds:
                raise ValueError(f"bad config line: {raw!r}")
            kind = str(kinds[key])
            if "list" in kind or "tuple" in kind:
                kw[key] = [int(v) for v in val.split(",")]
            elif kind == "bool":
                kw[key] = val.lower() in ("1", "true", "yes")
            elif kind == "int":
                kw[key] = int(val)
            elif val.lower() == "none":
                kw[key] = None
            else:
                kw[key] = float(val)
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_text(Path(path).read_text())


# ---------------------------------------------------------------------------
# resampling


def pixel_unshuffle(x: np.ndarray, r: int) -> np.ndarray:
    """``(C, h, w) -> (C r^2, h/r, w/r)``; output channel ``c r^2 + i r + j`` holds ``x[c, i::r, j::r]``."""
    c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(f"spatial extents {h}x{w} not divisible by {r}")
    return x.reshape(c, h // r, r, w // r, r).transpose(0, 2, 4, 1, 3).reshape(c * r * r, h // r, w // r)


def pixel_shuffle(x: np.ndarray, r: int) -> np.ndarray:
    c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"{c} channels not divisible by {r * r}")
    return x.reshape(c // (r * r), r, r, h, w).transpose(0, 3, 1, 4, 2).reshape(c // (r * r), h * r, w * r)


# ---------------------------------------------------------------------------
# selective kernel fusion


@dataclass
class SkffWeights:
    squeeze: np.ndarray  # (d, C)
    expand: list[np.ndarray] = field(default_factory=list)  # per branch (C, d)

    @staticmethod
    def reduced(channels: int, reduction: int = 8) -> int:
        return max(channels // reduction, 4)


def skff_branch_weights(branch_feats: Sequence[np.ndarray], w: SkffWeights) -> np.ndarray:
    """Per-channel softmax over branches, shape ``(branches, C)``."""
    pooled = np.sum(branch_feats, axis=0).mean(axis=(1, 2))
    z = leaky_relu(w.squeeze @ pooled, 0.2)
    logits = np.stack([e @ z for e in w.expand])
    logits -= logits.max(axis=0, keepdims=True)
    a = np.exp(logits)
    return a / a.sum(axis=0, keepdims=True)


def skff_fuse(branch_feats: Sequence[np.ndarray], w: SkffWeights) -> np.ndarray:
    if len(branch_feats) < 2:
        raise ValueError("SKFF needs at least two branches")
    if len({f.shape for f in branch_feats}) != 1:
        raise ShapeError("branch features differ in shape")
    if len(w.expand) != len(branch_feats):
        raise ValueError(f"{len(w.expand)} expansion heads for {len(branch_feats)} branches")
    a = skff_branch_weights(branch_feats, w)
    out = np.zeros_like(branch_feats[0])
    for ab, f in zip(a, branch_feats):
        out += ab[:, None, None] * f
    return out


# ---------------------------------------------------------------------------
# parameter layout


def _skff_shapes(prefix: str, c: int, nb: int, reduction: int) -> dict:
    d = SkffWeights.reduced(c, reduction)
    out = {f"{prefix}.squeeze": (d, c)}
    for j in range(nb):
        out[f"{prefix}.expand{j}"] = (c, d)
    return out


def block_shapes(prefix: str, c: int, cfg: ModelConfig) -> dict:
    s = {f"{prefix}.norm1.weight": (c,)}
    if not cfg.bias_free_norm:
        s[f"{prefix}.norm1.bias"] = (c,)
    s[f"{prefix}.attn.qkv"] = (3 * c, c)
    s[f"{prefix}.attn.qkv_dw"] = (3 * c, 3, 3)
    s[f"{prefix}.attn.proj"] = (c, c)
    for g, shape in enumerate(attn.cpe_shapes(c, cfg.cpe_kernels)):
        s[f"{prefix}.attn.cpe{g}"] = shape
    s[f"{prefix}.attn.s"] = (1,)
    s[f"{prefix}.norm2.weight"] = (c,)
    if not cfg.bias_free_norm:
        s[f"{prefix}.norm2.bias"] = (c,)
    s[f"{prefix}.ffn.pw_in"] = (c, c)
    for k in cfg.ffn_kernels:
        s[f"{prefix}.ffn.dw{k}"] = (c, k, k)
    s.update(_skff_shapes(f"{prefix}.ffn.skff", c, len(cfg.ffn_kernels), cfg.skff_reduction))
    s[f"{prefix}.ffn.pw_out"] = (c, c)
    return s


def stage_embed_configs(cfg: ModelConfig, stage: int) -> list[DeformableEmbedConfig]:
    c = cfg.stage_widths()[stage]
    return [DeformableEmbedConfig(c, c, cfg.embed_kernel, j + 1, cfg.offset_bound)
            for j in range(cfg.branches[stage])]


def stage_shapes(prefix: str, stage: int, cfg: ModelConfig) -> dict:
    c = cfg.stage_widths()[stage]
    s = {}
    for j, ecfg in enumerate(stage_embed_configs(cfg, stage)):
        for l in range(ecfg.depth):
            for name, shape in DsdcnWeights.shapes(ecfg.layer(l)).items():
                s[f"{prefix}.b{j}.embed{l}.{name}"] = shape
        for m in range(cfg.blocks[stage]):
            s.update(block_shapes(f"{prefix}.b{j}.block{m}", c, cfg))
    if cfg.branches[stage] > 1:
        s.update(_skff_shapes(f"{prefix}.fuse", c, cfg.branches[stage], cfg.skff_reduction))
    return s


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    c = cfg.channels
    w = cfg.stage_widths()
    s = {"stem.weight": (c[0], cfg.in_channels, 3, 3), "stem.bias": (c[0],)}
    for i in range(3):
        s.update(stage_shapes(f"stage{i}", i, cfg))
        s[f"down{i}.weight"] = (c[i + 1] // 4, c[i], 3, 3)
    s.update(stage_shapes("stage3", 3, cfg))
    for i in (4, 5, 6):
        s[f"up{i}.weight"] = (4 * c[i], w[i - 1] if i > 4 else c[3], 3, 3)
        if i < 6:
            s[f"reduce{i}.weight"] = (c[i], 2 * c[i])
        s.update(stage_shapes(f"stage{i}", i, cfg))
    s.update(stage_shapes("stage7", 7, cfg))
    s["final.weight"] = (cfg.in_channels, w[7], 3, 3)
    s["final.bias"] = (cfg.in_channels,)
    return s


def count_params(model) -> int:
    """Total scalar count for a :class:`ModelConfig` or a ``{name: shape}`` mapping."""
    shapes = param_shapes(model) if isinstance(model, ModelConfig) else model
    return int(sum(int(np.prod(shape, dtype=np.int64)) for shape in shapes.values()))


def param_role(name: str) -> str:
    leaf = name.rsplit(".", 1)[-1]
    if ".embed" in name:
        return "embedding.offset-head" if leaf.startswith("offset") else "embedding.value"
    if ".attn." in name:
        return "attention.modulation" if leaf == "s" else "attention." + leaf.rstrip("0123456789")
    if "norm" in name:
        return "norm"
    if "skff" in name or ".fuse." in name:
        return "skff"
    if ".ffn." in name:
        return "ffn"
    return name.split(".")[0].rstrip("0123456789")


def init_params(cfg: ModelConfig, seed: int = 0, std: float = 0.02) -> Params:
    """Truncated-normal weights, unit norm scales, zero biases and offset heads, s = modulation."""
    rng = make_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "s":
            params[name] = np.full(shape, cfg.modulation)
        elif leaf.endswith("bias"):
            params[name] = np.zeros(shape)
        elif leaf == "weight" and ".norm" in name:
            params[name] = np.ones(shape)
        elif ".embed" in name and leaf.startswith("offset"):
            params[name] = np.zeros(shape)
        else:
            params[name] = trunc_normal(rng, shape, std)
    return params


def save_model(directory, cfg: ModelConfig, params: Params) -> None:
    directory = Path(directory)
    save_checkpoint(directory, params, {n: param_role(n) for n in params})
    (directory / "model.cfg").write_text(cfg.to_text())


def load_model(directory) -> tuple[ModelConfig, Params]:
    directory = Path(directory)
    cfg = ModelConfig.load(directory / "model.cfg")
    params = load_checkpoint(directory)
    expected = param_shapes(cfg)
    if set(expected) != set(params):
        raise ValueError("checkpoint parameters do not match model.cfg")
    return cfg, params


# ---------------------------------------------------------------------------
# forward pass


def _skff_from(params: Mapping, prefix: str, nb: int) -> SkffWeights:
    return SkffWeights(params[f"{prefix}.squeeze"], [params[f"{prefix}.expand{j}"] for j in range(nb)])


def _tmsa_from(params: Mapping, prefix: str, groups: int) -> attn.TmsaWeights:
    return attn.TmsaWeights(qkv=params[f"{prefix}.qkv"], proj=params[f"{prefix}.proj"],
                            cpe=[params[f"{prefix}.cpe{g}"] for g in range(groups)], qkv_dw=params[f"{prefix}.qkv_dw"])


def _dsdcn_from(params: Mapping, prefix: str) -> DsdcnWeights:
    return DsdcnWeights(**{name: params[f"{prefix}.{name}"] for name in DsdcnWeights.__dataclass_fields__})


def transformer_block(x: np.ndarray, params: Mapping, prefix: str, cfg: ModelConfig) -> np.ndarray:
    """Pre-norm residual block: attention, then the selective-kernel feed-forward substitute."""
    c = x.shape[0]
    if c % cfg.heads(c):
        raise ShapeError(f"{c} channels not divisible into heads")
    get = params.get
    acfg = cfg.attention_config(c, float(params[f"{prefix}.attn.s"][0]))
    z = layer_norm(x, params[f"{prefix}.norm1.weight"], get(f"{prefix}.norm1.bias"))
    x = x + attn.tmsa_pp_full(z, _tmsa_from(params, f"{prefix}.attn", len(cfg.cpe_kernels)), acfg)
    z = layer_norm(x, params[f"{prefix}.norm2.weight"], get(f"{prefix}.norm2.bias"))
    h = pointwise_conv(z, params[f"{prefix}.ffn.pw_in"])
    paths = [gelu(depthwise_conv2d(h, params[f"{prefix}.ffn.dw{k}"])) for k in cfg.ffn_kernels]
    fused = skff_fuse(paths, _skff_from(params, f"{prefix}.ffn.skff", len(paths)))
    return x + pointwise_conv(fused, params[f"{prefix}.ffn.pw_out"])


def _run_branch(x, params, prefix, stage, j, ecfg, cfg):
    layers = [_dsdcn_from(params, f"{prefix}.b{j}.embed{l}") for l in range(ecfg.depth)]
    t = embed_branch(x, layers, ecfg)
    for m in range(cfg.blocks[stage]):
        t = transformer_block(t, params, f"{prefix}.b{j}.block{m}", cfg)
    return t


def stage_forward(x: np.ndarray, params: Mapping, stage: int, cfg: ModelConfig,
                  branch_order: Sequence[int] | None = None, threads: int = 1) -> np.ndarray:
    """Embed into each branch, run its blocks, fuse with SKFF and add the stage input."""
    prefix = f"stage{stage}"
    ecfgs = stage_embed_configs(cfg, stage)
    order = list(branch_order) if branch_order is not None else list(range(len(ecfgs)))
    if sorted(order) != list(range(len(ecfgs))):
        raise ValueError(f"branch_order {order} is not a permutation of {len(ecfgs)} branches")
    outs: list[np.ndarray | None] = [None] * len(ecfgs)
    if threads > 1 and len(order) > 1:
        with concurrent.futures.ThreadPoolExecutor(threads) as pool:
            futs = {j: pool.submit(_run_branch, x, params, prefix, stage, j, ecfgs[j], cfg) for j in order}
            for j, fut in futs.items():
                outs[j] = fut.result()
    else:
        for j in order:
            outs[j] = _run_branch(x, params, prefix, stage, j, ecfgs[j], cfg)
    if len(outs) == 1:
        return x + outs[0]
    return x + skff_fuse(outs, _skff_from(params, f"{prefix}.fuse", len(outs)))


def backbone_forward(image: np.ndarray, cfg: ModelConfig, params: Mapping, branch_order=None,
                     threads: int = 1) -> np.ndarray:
    """Restore ``image`` (C x h x w, h and w divisible by 8): returns ``image + residual``."""
    c_in, h, w = image.shape
    if c_in != cfg.in_channels:
        raise ShapeError(f"expected {cfg.in_channels} input channels, got {c_in}")
    if h % 8 or w % 8:
        raise ShapeError(f"spatial extents {h}x{w} must be divisible by 8")
    check_finite(image, "image")

    def run(x, i):
        order = branch_order[i] if branch_order is not None else None
        return stage_forward(x, params, i, cfg, order, threads)

    x = conv2d(image, params["stem.weight"], params["stem.bias"])
    skips = []
    for i in range(3):
        x = run(x, i)
        skips.append(x)
        x = pixel_unshuffle(conv2d(x, params[f"down{i}.weight"]), 2)
    x = run(x, 3)
    for i in (4, 5, 6):
        x = pixel_shuffle(conv2d(x, params[f"up{i}.weight"]), 2)
        x = np.concatenate([x, skips[6 - i]], axis=0)
        if i < 6:
            x = pointwise_conv(x, params[f"reduce{i}.weight"])
        x = run(x, i)
    x = run(x, 7)
    residual = conv2d(x, params["final.weight"], params["final.bias"])
    return image + residual


def zero_residual_head(params: Params) -> Params:
    out = dict(params)
    out["final.weight"] = np.zeros_like(params["final.weight"])
    out["final.bias"] = np.zeros_like(params["final.bias"])
    return out


def with_modulation(cfg: ModelConfig, s: float) -> ModelConfig:
    return replace(cfg, modulation=s)
