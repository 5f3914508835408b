"""Complexity formulas, runtime scaling, attention-map rank/entropy and ablation sweeps."""
from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import attention as attn
from .embedding import DeformableEmbedConfig, DsdcnWeights, dsdcn_forward
from .tensor_core import _atomic_write, make_rng, rank_estimate

U63 = 2**63
QUADRATIC_MEMORY_CEILING = 1 << 30  # bytes for one n x n float64 map

# Query and keys used as the focusing probe (two-dimensional, roughly unit norm).
PROBE_QUERY = np.array([[0.2000, 0.9798]])
PROBE_KEYS = np.array([[0.1000, 0.9950], [0.9165, 0.4000], [-0.9798, -0.2000], [0.995, -0.1000]])


def attention_macs(kind: str, h: int, w: int, dim: int, kernel: int = 3) -> int:
    """Multiply-accumulate count of one attention layer on an ``h x w`` map with ``dim`` channels.

    ``kind`` is ``"softmax"`` (2 (hw)^2 D + 4 hw D^2) or ``"tmsa++"`` (8 hw D^2 + 4 K^2 hw D).
    """
    if any(int(a) != a or a <= 0 for a in (h, w, dim, kernel)):
        raise ValueError("arguments must be positive integers")
    hw = h * w
    if kind == "softmax":
        value = 2 * hw * hw * dim + 4 * hw * dim * dim
    elif kind in ("tmsa++", "tmsa"):
        value = 8 * hw * dim * dim + 4 * kernel * kernel * hw * dim
    else:
        raise ValueError(f"unknown attention kind {kind!r}")
    if value >= U63:
        raise OverflowError(f"MAC count {value} exceeds 63 bits")
    return value


# ---------------------------------------------------------------------------
# runtime scaling


@dataclass
class ScalingReport:
    op: str
    sizes: list[int]
    median_seconds: list[float]
    slope: float
    residual: float
    timer_resolution: float
    coarse_timer: bool = False

    def rows(self) -> list[dict]:
        return [{"op": self.op, "n": n, "median_s": t, "slope": self.slope, "residual": self.residual}
                for n, t in zip(self.sizes, self.median_seconds)]


def loglog_fit(sizes: Sequence[float], times: Sequence[float]) -> tuple[float, float]:
    """Least-squares slope of log(time) on log(size) and the RMS residual."""
    lx, ly = np.log(sizes), np.log(times)
    coef, *_ = np.polyfit(lx, ly, 1, full=True)
    resid = ly - np.polyval(coef, lx)
    return float(coef[0]), float(np.sqrt(np.mean(resid**2)))


def _kernel_runner(op: str, n: int, dim: int, rng) -> Callable[[], object]:
    if op == "noop":
        return lambda: None
    q, k, v = rng.standard_normal((3, n, dim))
    if op == "tmsa_linear":
        cfg = attn.AttentionConfig(head_dim=dim)
        return lambda: attn.tmsa_linear(q, k, v, cfg)
    if n * n * 8 > QUADRATIC_MEMORY_CEILING:
        raise MemoryError(f"{op} at n={n} would materialise {n * n * 8} bytes")
    if op == "softmax":
        return lambda: attn.softmax_attention_oracle(q, k, v)
    if op == "tmsa_quadratic":
        cfg = attn.AttentionConfig(head_dim=dim)
        return lambda: attn.tmsa_quadratic_oracle(q, k, v, cfg)
    raise ValueError(f"unknown kernel {op!r}")


def bench_scaling(op: str, sizes: Sequence[int], reps: int = 5, dim: int = 16, seed: int = 0) -> ScalingReport:
    """Median wall time per size (one discarded warm-up) and the fitted log-log slope."""
    sizes = list(sizes)
    if len(sizes) < 4 or any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("need at least four strictly increasing sizes")
    if reps < 5:
        raise ValueError("reps must be >= 5")
    rng = make_rng(seed)
    runners = [_kernel_runner(op, n, dim, rng) for n in sizes]  # allocation checks before any timing
    resolution = time.get_clock_info("perf_counter").resolution
    medians = []
    for run in runners:
        run()
        samples = []
        for _ in range(reps):
            t0 = time.perf_counter()
            run()
            samples.append(time.perf_counter() - t0)
        medians.append(max(statistics.median(samples), resolution))
    slope, residual = loglog_fit(sizes, medians)
    return ScalingReport(op, sizes, medians, slope, residual, resolution, medians[0] < 100 * resolution)


# ---------------------------------------------------------------------------
# attention-map structure


def row_entropy(weights: np.ndarray) -> float:
    """Mean Shannon entropy (nats) of the rows of a row-stochastic matrix."""
    p = weights / weights.sum(axis=1, keepdims=True)
    logs = np.log(np.where(p > 0, p, 1.0))
    return float(-(p * logs).sum(axis=1).mean())


def conv_matrix(kernel: np.ndarray, h: int, w: int) -> np.ndarray:
    """Dense ``(hw x hw)`` matrix of a zero-padded 'same' correlation with ``kernel`` on an h x w grid."""
    k = kernel.shape[0]
    r = k // 2
    n = h * w
    m = np.zeros((n, n))
    for y in range(h):
        for x in range(w):
            for a in range(k):
                for b in range(k):
                    yy, xx = y + a - r, x + b - r
                    if 0 <= yy < h and 0 <= xx < w:
                        m[y * w + x, yy * w + xx] += kernel[a, b]
    return m


def measure_attention_rank(q: np.ndarray, k: np.ndarray, cfg: attn.AttentionConfig, grid: tuple[int, int],
                           cpe_kernel: np.ndarray | None = None, tol: float = 1e-8) -> tuple[int, int]:
    """Rank of the kernel-only attention map and of the map plus the CPE convolution matrix.

    The second map is the linear operator that ``V' + CPE(V)`` applies to one
    value channel, i.e. the row-normalised weights plus the dense form of
    the depthwise kernel.
    """
    n = q.shape[0]
    if n > 1024:
        raise MemoryError("rank measurement limited to n <= 1024")
    if grid[0] * grid[1] != n:
        raise ValueError(f"grid {grid} does not hold {n} tokens")
    dense = attn.dense_attention_map(q, k, cfg)
    r_kernel = rank_estimate(attn.kernel_map(q, k, cfg), tol)
    if cpe_kernel is None:
        return r_kernel, r_kernel
    return r_kernel, rank_estimate(dense + conv_matrix(cpe_kernel, *grid), tol)


def probe_map(cfg: attn.AttentionConfig, include_remainder: bool = True) -> np.ndarray:
    return attn.dense_attention_map(PROBE_QUERY, PROBE_KEYS, cfg, include_remainder=include_remainder)


def locality_radius(offset_bound: float | None, kernel: int = 3, size: int = 21, seed: int = 0,
                    offset_std: float = 2.0, trials: int = 3) -> int:
    """Largest Chebyshev distance from the centre pixel at which perturbing the input
    changes the centre output of a DSDCN layer with large random offsets.

    The maximum is taken over ``trials`` independently drawn layers.
    """
    radius = 0
    for t in range(trials):
        rng = make_rng(seed + t)
        cfg = DeformableEmbedConfig(1, 1, kernel, offset_bound=offset_bound)
        w = DsdcnWeights.init(rng, cfg, std=1.0, offset_std=offset_std)
        x = rng.standard_normal((1, size, size))
        c = size // 2
        base = dsdcn_forward(x, w, cfg)[0, c, c]
        for y in range(size):
            for xx in range(size):
                xp = x.copy()
                xp[0, y, xx] += 1.0
                if dsdcn_forward(xp, w, cfg)[0, c, c] != base:
                    radius = max(radius, abs(y - c), abs(xx - c))
    return radius


# ---------------------------------------------------------------------------
# ablations


@dataclass
class AblationSpec:
    remainder: bool = True
    cpe: bool = True
    first_order_only: bool = True
    offset_bounds: tuple = (None, 2.0, 3.0, 4.0)
    focused_factors: tuple = (3.0, 4.0, 5.0, 8.0)


@dataclass
class SyntheticTask:
    x: np.ndarray  # (C, h, w)
    weights: attn.TmsaWeights
    cfg: attn.AttentionConfig
    seed: int = 0

    @classmethod
    def make(cls, seed: int = 0, channels: int = 8, size: int = 8, heads: int = 2) -> "SyntheticTask":
        rng = make_rng(seed)
        cfg = attn.AttentionConfig(heads=heads, head_dim=channels // heads)
        return cls(rng.standard_normal((channels, size, size)), attn.TmsaWeights.random(rng, channels), cfg, seed)


@dataclass
class _Variant:
    name: str
    cfg: attn.AttentionConfig
    kernel: Callable | None = None
    include_remainder: bool = True
    offset_bound: object = field(default="unset")


def _variants(spec: AblationSpec, base: attn.AttentionConfig) -> list[_Variant]:
    out = [_Variant("baseline", base)]
    if spec.remainder:
        out.append(_Variant("remainder_off", replace(base, modulation=0.0), include_remainder=False))
    if spec.cpe:
        out.append(_Variant("cpe_off", replace(base, use_cpe=False)))
    if spec.first_order_only:
        out.append(_Variant("first_order_only", base,
                            kernel=lambda q, k, v, c: attn.first_order_linear(q, k, v, c.epsilon),
                            include_remainder=False))
    for b in spec.offset_bounds:
        name = "offset_bound=none" if b is None else f"offset_bound={b:g}"
        out.append(_Variant(name, base, offset_bound=b))
    for p in spec.focused_factors:
        out.append(_Variant(f"p={p:g}", replace(base, focused_factor=p)))
    return out


def _quadratic_first_order(q, k, v, c):
    return attn.tmsa_quadratic_oracle(q, k, v, replace(c, modulation=0.0))


def run_ablation(spec: AblationSpec, task: SyntheticTask) -> list[dict]:
    """One row per configuration: oracle error of the block, probe entropy and peak weight,
    DSDCN locality radius (offset rows only) and wall time."""
    rows = []
    for var in _variants(spec, task.cfg):
        kernel = var.kernel or attn.tmsa_linear
        oracle = _quadratic_first_order if var.kernel is not None else attn.tmsa_quadratic_oracle
        t0 = time.perf_counter()
        out = attn.tmsa_pp_full(task.x, task.weights, var.cfg, kernel=kernel)
        runtime = time.perf_counter() - t0
        ref = attn.tmsa_pp_full(task.x, task.weights, var.cfg, kernel=oracle)
        probe_cfg = replace(var.cfg, head_dim=2, heads=1)
        pm = probe_map(probe_cfg, include_remainder=var.include_remainder)
        row = {
            "config": var.name,
            "oracle_error": float(np.abs(out - ref).max()),
            "probe_entropy": row_entropy(pm),
            "probe_max_weight": float(pm.max()),
            "locality_radius": "",
            "runtime_s": runtime,
        }
        if var.offset_bound != "unset":
            row["locality_radius"] = locality_radius(var.offset_bound)
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# report writers


def rows_to_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def write_csv(path, rows: Sequence[dict]) -> None:
    _atomic_write(Path(path), rows_to_csv(rows).encode())


def write_loglog_svg(path, reports: Sequence[ScalingReport]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for rep in reports:
        ax.loglog(rep.sizes, rep.median_seconds, "o-", label=f"{rep.op} (slope {rep.slope:.2f})")
    ax.set_xlabel("tokens n")
    ax.set_ylabel("median time [s]")
    ax.legend()
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    _atomic_write(Path(path), buf.getvalue())


def bench_branch_parallelism(cfg, params, image: np.ndarray, threads: int, reps: int = 3) -> float:
    """Serial over threaded wall time of a backbone forward pass (ratio > 1 means speedup)."""
    from .backbone import backbone_forward

    def timed(t):
        best = []
        for _ in range(reps):
            t0 = time.perf_counter()
            backbone_forward(image, cfg, params, threads=t)
            best.append(time.perf_counter() - t0)
        return statistics.median(best)

    return timed(1) / timed(threads)
