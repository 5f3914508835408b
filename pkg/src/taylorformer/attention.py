"""Taylor-expanded linear attention with a focused remainder term.

For unit-normalised queries ``q~`` and keys ``k~`` the attention weight of
token ``j`` for query ``i`` is

    (1 + q~_i . k~_j + s * phi(q~_i) . phi(k~_j)) / (row sum + eps)

``tmsa_linear`` evaluates it in O(n D^2) by reassociating the products;
``tmsa_quadratic_oracle`` materialises the n x n weight matrix instead.
"""
from __future__ import annotations

import contextlib
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .layers import depthwise_conv2d, pointwise_conv
from .tensor_core import NonFiniteError, ShapeError, check_finite, normalize_rows, row_norms

MAX_DENSE_TOKENS = 4096

_active_faults: set[str] = set()


@contextlib.contextmanager
def inject_fault(name: str):
    """Test hook.  ``"phi_sign"`` negates the output of :func:`phi_p` while active."""
    _active_faults.add(name)
    try:
        yield
    finally:
        _active_faults.discard(name)


class DenominatorWarning(RuntimeWarning):
    pass


class DenominatorError(FloatingPointError):
    pass


@dataclass
class AttentionConfig:
    heads: int = 1
    head_dim: int = 8
    focused_factor: float = 4.0
    modulation: float = 0.5
    epsilon: float = 1e-6
    cpe_kernels: tuple[int, ...] = (3, 5)
    use_cpe: bool = True

    def __post_init__(self):
        if self.heads < 1 or self.head_dim < 1:
            raise ValueError("heads and head_dim must be positive")
        if self.focused_factor < 1:
            raise ValueError("focused_factor must be >= 1")
        if self.modulation < 0:
            raise ValueError("modulation must be >= 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if any(k < 1 or k % 2 == 0 for k in self.cpe_kernels):
            raise ValueError(f"CPE kernels must be odd: {self.cpe_kernels}")
        self.cpe_kernels = tuple(self.cpe_kernels)

    @property
    def channels(self) -> int:
        return self.heads * self.head_dim


@dataclass
class QkvTriple:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if not (self.q.ndim == self.k.ndim == self.v.ndim == 2):
            raise ShapeError("q, k, v must be 2-D (tokens x dim)")
        if not (self.q.shape == self.k.shape == self.v.shape):
            raise ShapeError(f"q, k, v shapes differ: {self.q.shape}, {self.k.shape}, {self.v.shape}")

    def __iter__(self):
        return iter((self.q, self.k, self.v))

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @classmethod
    def random(cls, rng: np.random.Generator, n: int, d: int) -> "QkvTriple":
        return cls(*rng.standard_normal((3, n, d)))


def _check_qkv(q, k, v):
    QkvTriple(q, k, v)
    if q.shape[0] < 1:
        raise ShapeError("need at least one token")
    for name, x in (("q", q), ("k", k), ("v", v)):
        check_finite(x, name)


def phi_p(x: np.ndarray, p: float) -> np.ndarray:
    """Row-wise focusing map: ReLU, elementwise power ``p``, rescale to the ReLU'd norm.

    Rows with no positive entry map to zero.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    r = np.maximum(x, 0.0)
    u = r**p
    a = row_norms(r)
    b = row_norms(u)
    scale = np.divide(a, b, out=np.zeros_like(a), where=b > 0)
    out = u * scale[:, None]
    if "phi_sign" in _active_faults:
        out = -out
    return out


def kernel_features(q: np.ndarray, k: np.ndarray, p: float):
    """Normalised queries/keys and their focused images: ``(q~, k~, phi(q~), phi(k~))``."""
    qt = normalize_rows(q)
    kt = normalize_rows(k)
    return qt, kt, phi_p(qt, p), phi_p(kt, p)


def softmax_attention_oracle(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Direct O(n^2) ``softmax(q k^T / sqrt(D)) v``."""
    _check_qkv(q, k, v)
    logits = q @ k.T / np.sqrt(q.shape[1])
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w @ v


def kernel_map(q: np.ndarray, k: np.ndarray, cfg: AttentionConfig, include_first_order: bool = True,
               include_remainder: bool = True) -> np.ndarray:
    """Unnormalised weights ``1 + q~k~^T + s phi(q~)phi(k~)^T`` (n_q x n_k)."""
    qt, kt, qa, ka = kernel_features(q, k, cfg.focused_factor)
    m = np.ones((q.shape[0], k.shape[0]))
    if include_first_order:
        m += qt @ kt.T
    if include_remainder:
        m += cfg.modulation * (qa @ ka.T)
    return m


def dense_attention_map(q: np.ndarray, k: np.ndarray, cfg: AttentionConfig, include_first_order: bool = True,
                        include_remainder: bool = True) -> np.ndarray:
    """Row-normalised attention weights, materialised.  Guarded to ``n <= 4096``."""
    if max(q.shape[0], k.shape[0]) > MAX_DENSE_TOKENS:
        raise MemoryError(f"dense map over {MAX_DENSE_TOKENS} tokens refused")
    check_finite(q, "q")
    check_finite(k, "k")
    m = kernel_map(q, k, cfg, include_first_order, include_remainder)
    return m / (m.sum(axis=1, keepdims=True) + cfg.epsilon)


def tmsa_quadratic_oracle(q: np.ndarray, k: np.ndarray, v: np.ndarray, cfg: AttentionConfig) -> np.ndarray:
    _check_qkv(q, k, v)
    m = kernel_map(q, k, cfg)
    return (m / (m.sum(axis=1, keepdims=True) + cfg.epsilon)) @ v


def _check_denominator(den: np.ndarray, eps: float) -> None:
    low = den.min()
    if low < eps:
        raise DenominatorError(f"attention denominator {low:.3e} fell below epsilon {eps:.1e}")
    if low < 10 * eps:
        warnings.warn(f"attention denominator {low:.3e} is within 10x of epsilon", DenominatorWarning, stacklevel=3)


def tmsa_linear(q: np.ndarray, k: np.ndarray, v: np.ndarray, cfg: AttentionConfig) -> np.ndarray:
    """Linear-time evaluation; agrees with :func:`tmsa_quadratic_oracle` to rounding."""
    _check_qkv(q, k, v)
    n = q.shape[0]
    s = cfg.modulation
    qt, kt, qa, ka = kernel_features(q, k, cfg.focused_factor)
    kv = kt.T @ v
    k_sum = kt.sum(axis=0)
    fkv = ka.T @ v
    fk_sum = ka.sum(axis=0)
    v_sum = v.sum(axis=0)
    num = v_sum + qt @ kv + s * (qa @ fkv)
    den = n + qt @ k_sum + s * (qa @ fk_sum) + cfg.epsilon
    _check_denominator(den, cfg.epsilon)
    return num / den[:, None]


def first_order_linear(q: np.ndarray, k: np.ndarray, v: np.ndarray, epsilon: float = 1e-6) -> np.ndarray:
    """Taylor attention without the remainder term."""
    _check_qkv(q, k, v)
    qt = normalize_rows(q)
    kt = normalize_rows(k)
    num = v.sum(axis=0) + qt @ (kt.T @ v)
    den = q.shape[0] + qt @ kt.sum(axis=0) + epsilon
    return num / den[:, None]


# ---------------------------------------------------------------------------
# convolutional positional encoding


def cpe_group_sizes(channels: int, kernels: Sequence[int]) -> list[int]:
    """Split ``channels`` evenly over the kernel groups; the first group absorbs any remainder."""
    g = len(kernels)
    if g == 0 or channels < g:
        raise ValueError(f"cannot split {channels} channels into {g} CPE groups")
    base = channels // g
    return [base + channels - base * g] + [base] * (g - 1)


def cpe(v: np.ndarray, weights: Sequence[np.ndarray]) -> np.ndarray:
    """Depthwise convolution of consecutive channel groups of ``v`` (D x h x w).

    ``weights[i]`` has shape ``(c_i, k_i, k_i)``; the ``c_i`` must sum to D.
    """
    sizes = [w.shape[0] for w in weights]
    if sum(sizes) != v.shape[0]:
        raise ValueError(f"CPE groups {sizes} do not cover {v.shape[0]} channels")
    out = []
    start = 0
    for w in weights:
        c = w.shape[0]
        out.append(depthwise_conv2d(v[start : start + c], w))
        start += c
    return np.concatenate(out, axis=0)


def cpe_shapes(channels: int, kernels: Sequence[int]) -> list[tuple[int, int, int]]:
    return [(c, k, k) for c, k in zip(cpe_group_sizes(channels, kernels), kernels)]


# ---------------------------------------------------------------------------
# full block


@dataclass
class TmsaWeights:
    qkv: np.ndarray  # (3C, C) pointwise projection
    proj: np.ndarray  # (C, C) output projection
    cpe: list[np.ndarray] = field(default_factory=list)
    qkv_dw: np.ndarray | None = None  # (3C, 3, 3) depthwise conv after qkv
    qkv_bias: np.ndarray | None = None
    proj_bias: np.ndarray | None = None

    @classmethod
    def identity(cls, channels: int, kernels: Sequence[int] = (3, 5)) -> "TmsaWeights":
        eye = np.eye(channels)
        return cls(qkv=np.vstack([eye, eye, eye]), proj=eye.copy(),
                   cpe=[np.zeros(s) for s in cpe_shapes(channels, kernels)])

    @classmethod
    def random(cls, rng: np.random.Generator, channels: int, kernels: Sequence[int] = (3, 5),
               std: float = 0.2, depthwise: bool = True) -> "TmsaWeights":
        c = channels
        return cls(qkv=rng.normal(0, std, (3 * c, c)), proj=rng.normal(0, std, (c, c)),
                   cpe=[rng.normal(0, std, s) for s in cpe_shapes(c, kernels)],
                   qkv_dw=rng.normal(0, std, (3 * c, 3, 3)) if depthwise else None)


def split_heads(x: np.ndarray, heads: int) -> list[np.ndarray]:
    """``(C, h, w)`` -> per-head token matrices ``(h*w, C/heads)``."""
    c, h, w = x.shape
    d = c // heads
    return [x[i * d : (i + 1) * d].reshape(d, h * w).T for i in range(heads)]


def merge_heads(parts: Sequence[np.ndarray], h: int, w: int) -> np.ndarray:
    return np.concatenate([p.T.reshape(-1, h, w) for p in parts], axis=0)


def project_qkv(x: np.ndarray, weights: TmsaWeights):
    qkv = pointwise_conv(x, weights.qkv, weights.qkv_bias)
    if weights.qkv_dw is not None:
        qkv = depthwise_conv2d(qkv, weights.qkv_dw)
    return np.split(qkv, 3, axis=0)


def tmsa_pp_full(x: np.ndarray, weights: TmsaWeights, cfg: AttentionConfig, kernel=None) -> np.ndarray:
    """Project, multi-head attention, add CPE of V, output projection.  ``x`` is ``(C, h, w)``.

    ``kernel`` replaces the per-head attention routine (defaults to :func:`tmsa_linear`).
    """
    c, h, w = x.shape
    if c != cfg.channels:
        raise ShapeError(f"input has {c} channels, config expects {cfg.heads} x {cfg.head_dim}")
    check_finite(x, "x")
    kernel = kernel or tmsa_linear
    q, k, v = project_qkv(x, weights)
    heads = [kernel(qh, kh, vh, cfg) for qh, kh, vh in zip(split_heads(q, cfg.heads), split_heads(k, cfg.heads),
                                                          split_heads(v, cfg.heads))]
    out = merge_heads(heads, h, w)
    if cfg.use_cpe:
        out = out + cpe(v, weights.cpe)
    return pointwise_conv(out, weights.proj, weights.proj_bias)


# ---------------------------------------------------------------------------
# gradients


class TmsaGrads(NamedTuple):
    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray
    ds: float


def _normalize_backward(x: np.ndarray, y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    norms = row_norms(x)
    safe = np.where(norms > 0, norms, 1.0)
    g = (gy - np.einsum("ij,ij->i", gy, y)[:, None] * y) / safe[:, None]
    g[norms == 0] = 0.0
    return g


def phi_p_backward(x: np.ndarray, g: np.ndarray, p: float) -> np.ndarray:
    """Vector-Jacobian product of :func:`phi_p`; ReLU subgradient is 0 at 0."""
    r = np.maximum(x, 0.0)
    u = r**p
    a = row_norms(r)
    b = row_norms(u)
    live = b > 0
    a_ = np.where(live, a, 1.0)
    b_ = np.where(live, b, 1.0)
    gu_dot = np.einsum("ij,ij->i", g, u)
    du = (a_ / b_)[:, None] * g - (a_ * gu_dot / b_**3)[:, None] * u
    da = gu_dot / b_
    dr = du * p * np.where(r > 0, r ** (p - 1), 0.0) + (da / a_)[:, None] * r
    dx = np.where(x > 0, dr, 0.0)
    dx[~live] = 0.0
    return dx


def tmsa_grad(q: np.ndarray, k: np.ndarray, v: np.ndarray, cfg: AttentionConfig, upstream: np.ndarray) -> TmsaGrads:
    """Gradients of ``sum(upstream * tmsa_linear(q, k, v))`` w.r.t. raw q, k, v and the modulation s."""
    _check_qkv(q, k, v)
    if upstream.shape != v.shape:
        raise ShapeError(f"upstream {upstream.shape} != output {v.shape}")
    if not np.all(np.isfinite(upstream)):
        raise NonFiniteError("upstream gradient contains NaN or Inf")
    n = q.shape[0]
    s = cfg.modulation
    p = cfg.focused_factor
    qt, kt, qa, ka = kernel_features(q, k, p)
    kv, k_sum = kt.T @ v, kt.sum(axis=0)
    fkv, fk_sum = ka.T @ v, ka.sum(axis=0)
    rem_num = qa @ fkv
    rem_den = qa @ fk_sum
    num = v.sum(axis=0) + qt @ kv + s * rem_num
    den = n + qt @ k_sum + s * rem_den + cfg.epsilon

    d_num = upstream / den[:, None]
    d_den = -np.einsum("ij,ij->i", upstream, num) / den**2

    ds = float(np.sum(d_num * rem_num) + d_den @ rem_den)
    d_qt = d_num @ kv.T + np.outer(d_den, k_sum)
    d_qa = s * (d_num @ fkv.T + np.outer(d_den, fk_sum))
    d_kv = qt.T @ d_num
    d_ksum = qt.T @ d_den
    d_fkv = s * (qa.T @ d_num)
    d_fksum = s * (qa.T @ d_den)

    d_kt = v @ d_kv.T + d_ksum[None, :]
    d_ka = v @ d_fkv.T + d_fksum[None, :]
    dv = kt @ d_kv + ka @ d_fkv + d_num.sum(axis=0)[None, :]

    d_qt = d_qt + phi_p_backward(qt, d_qa, p)
    d_kt = d_kt + phi_p_backward(kt, d_ka, p)
    dq = _normalize_backward(q, qt, d_qt)
    dk = _normalize_backward(k, kt, d_kt)
    return TmsaGrads(dq, dk, dv, ds)
