"""Gradient-descent fit of a single attention block on synthetic denoising.

The block is ``pred = x + W_o (attn(W_q x, W_k x, W_v x) + CPE(W_v x))`` with
one head over all channels; every gradient is written out by hand.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import attention as attn
from .layers import depthwise_conv2d
from .tensor_core import ShapeError, make_rng

log = logging.getLogger(__name__)

FFT_WEIGHT = 0.1


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# loss


def dft_matrix(n: int) -> np.ndarray:
    idx = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(idx, idx) / n)


def dft2(x: np.ndarray) -> np.ndarray:
    """Unnormalised 2-D DFT over the last two axes, by explicit DFT matrices."""
    fh, fw = dft_matrix(x.shape[-2]), dft_matrix(x.shape[-1])
    return fh @ x @ fw


def loss(pred: np.ndarray, target: np.ndarray, fft_weight: float = FFT_WEIGHT) -> float:
    """Mean absolute error plus ``fft_weight`` times the mean absolute error of DFT magnitudes."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} vs target {target.shape}")
    l1 = np.abs(pred - target).mean()
    spectral = np.abs(np.abs(dft2(pred)) - np.abs(dft2(target))).mean()
    return float(l1 + fft_weight * spectral)


def loss_grad(pred: np.ndarray, target: np.ndarray, fft_weight: float = FFT_WEIGHT) -> np.ndarray:
    n = pred.size
    g = np.sign(pred - target) / n
    yp = dft2(pred)
    mp = np.abs(yp)
    gmag = fft_weight * np.sign(mp - np.abs(dft2(target))) / n
    gy = np.where(mp > 0, gmag / np.where(mp > 0, mp, 1.0), 0.0) * yp
    fh, fw = dft_matrix(pred.shape[-2]), dft_matrix(pred.shape[-1])
    return g + np.real(fh.conj() @ gy @ fw.conj())


# ---------------------------------------------------------------------------
# task


@dataclass
class MicroTask:
    sigma: float = 0.1
    patch: int = 16
    batch: int = 4
    channels: int = 4
    seed: int = 0
    max_freq: int = 2
    fixed_batch: bool = False  # draw one batch and reuse it every step

    def clean(self, rng: np.random.Generator) -> np.ndarray:
        """Batch of smooth patterns: a few low-frequency zero-mean sinusoids per channel."""
        yy, xx = np.mgrid[0 : self.patch, 0 : self.patch] / self.patch
        out = np.zeros((self.batch, self.channels, self.patch, self.patch))
        for _ in range(3):
            fy = rng.integers(0, self.max_freq + 1, (self.batch, self.channels, 1, 1))
            fx = rng.integers(0, self.max_freq + 1, (self.batch, self.channels, 1, 1))
            ph = rng.uniform(0, 2 * np.pi, (self.batch, self.channels, 1, 1))
            amp = rng.uniform(0.05, 0.2, (self.batch, self.channels, 1, 1))
            out += amp * np.cos(2 * np.pi * (fy * yy + fx * xx) + ph)
        return out

    def sample(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        clean = self.clean(rng)
        return clean + rng.normal(0.0, self.sigma, clean.shape), clean


# ---------------------------------------------------------------------------
# block


def init_block(channels: int, rng: np.random.Generator, kernels=(3, 5), modulation: float = 0.5) -> dict:
    c = channels
    p = {
        "wq": rng.normal(0, 1 / np.sqrt(c), (c, c)),
        "wk": rng.normal(0, 1 / np.sqrt(c), (c, c)),
        "wv": np.eye(c) + rng.normal(0, 0.02, (c, c)),
        "wo": rng.normal(0, 0.02, (c, c)),
        "s": np.array([modulation]),
    }
    for g, shape in enumerate(attn.cpe_shapes(c, kernels)):
        p[f"cpe{g}"] = rng.normal(0, 0.02, shape)
    return p


def _cpe_weights(params):
    return [params[f"cpe{g}"] for g in range(sum(k.startswith("cpe") for k in params))]


def _block_cfg(params, channels: int, p: float) -> attn.AttentionConfig:
    return attn.AttentionConfig(heads=1, head_dim=channels, focused_factor=p,
                                modulation=max(float(params["s"][0]), 0.0))


def block_forward(x: np.ndarray, params: dict, p: float = 4.0) -> np.ndarray:
    c, h, w = x.shape
    tokens = x.reshape(c, h * w).T
    q, k, v = tokens @ params["wq"].T, tokens @ params["wk"].T, tokens @ params["wv"].T
    a = attn.tmsa_linear(q, k, v, _block_cfg(params, c, p))
    pos = attn.cpe(v.T.reshape(c, h, w), _cpe_weights(params)).reshape(c, h * w).T
    return x + ((a + pos) @ params["wo"].T).T.reshape(c, h, w)


def _depthwise_kernel_grad(x: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    r = k // 2
    xp = np.pad(x, ((0, 0), (r, r), (r, r)))
    _, h, w = x.shape
    out = np.empty((x.shape[0], k, k))
    for a in range(k):
        for b in range(k):
            out[:, a, b] = np.einsum("chw,chw->c", g, xp[:, a : a + h, b : b + w])
    return out


def block_backward(x: np.ndarray, params: dict, upstream: np.ndarray, p: float = 4.0) -> dict:
    """Gradients of ``sum(upstream * block_forward(x))`` for every block parameter."""
    c, h, w = x.shape
    n = h * w
    tokens = x.reshape(c, n).T
    q, k, v = tokens @ params["wq"].T, tokens @ params["wk"].T, tokens @ params["wv"].T
    cfg = _block_cfg(params, c, p)
    a = attn.tmsa_linear(q, k, v, cfg)
    v_img = v.T.reshape(c, h, w)
    kernels = _cpe_weights(params)
    pos = attn.cpe(v_img, kernels).reshape(c, n).T

    g_out = upstream.reshape(c, n).T
    grads = {"wo": g_out.T @ (a + pos)}
    g_mid = g_out @ params["wo"]
    tg = attn.tmsa_grad(q, k, v, cfg, g_mid)

    g_pos = g_mid.T.reshape(c, h, w)
    g_v_img = np.empty_like(v_img)
    start = 0
    for i, ker in enumerate(kernels):
        cg, ks = ker.shape[0], ker.shape[1]
        sl = slice(start, start + cg)
        grads[f"cpe{i}"] = _depthwise_kernel_grad(v_img[sl], g_pos[sl], ks)
        g_v_img[sl] = depthwise_conv2d(g_pos[sl], ker[:, ::-1, ::-1])
        start += cg
    dv = tg.dv + g_v_img.reshape(c, n).T
    grads["wq"] = tg.dq.T @ tokens
    grads["wk"] = tg.dk.T @ tokens
    grads["wv"] = dv.T @ tokens
    grads["s"] = np.array([tg.ds if params["s"][0] > 0 else 0.0])
    return grads


def batch_loss_and_grad(noisy: np.ndarray, clean: np.ndarray, params: dict, p: float = 4.0):
    total = 0.0
    grads = {name: np.zeros_like(val) for name, val in params.items()}
    for x, y in zip(noisy, clean):
        pred = block_forward(x, params, p)
        total += loss(pred, y)
        for name, g in block_backward(x, params, loss_grad(pred, y), p).items():
            grads[name] += g
    b = len(noisy)
    return total / b, {name: g / b for name, g in grads.items()}


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainState:
    params: dict
    steps: int = 0
    loss_history: list[float] = field(default_factory=list)

    @property
    def s(self) -> float:
        return float(self.params["s"][0])


DEFAULT_LR = 1.0
DEFAULT_STEPS = 500


def micro_train(task: MicroTask, steps: int = DEFAULT_STEPS, lr: float = DEFAULT_LR, p: float = 4.0,
                modulation: float = 0.5) -> TrainState:
    """Plain gradient descent; ``loss_history[i]`` is the batch loss before update ``i``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if lr < 0:
        raise ValueError("lr must be >= 0")
    rng = make_rng(task.seed)
    state = TrainState(init_block(task.channels, rng, modulation=modulation))
    data_rng = make_rng(task.seed + 1)
    batch = task.sample(data_rng) if task.fixed_batch else None
    for step in range(steps):
        noisy, clean = batch or task.sample(data_rng)
        value, grads = batch_loss_and_grad(noisy, clean, state.params, p)
        if not np.isfinite(value) or (state.loss_history and value > 1e3 * state.loss_history[0]):
            raise TrainingDiverged(f"loss {value:.3e} at step {step} (initial {state.loss_history[0]:.3e})")
        state.loss_history.append(value)
        for name, g in grads.items():
            state.params[name] = state.params[name] - lr * g
        state.steps += 1
        if step % 100 == 0:
            log.debug("step %d loss %.5f s %.4f", step, value, state.s)
    return state


