"""Self-check suites run by ``taylorformer verify``.

Each check yields a record ``{"suite", "check", "passed", "value", "limit"}``.
Records contain no timings, so a fixed seed gives a byte-identical report.
"""
from __future__ import annotations

import json
from typing import Callable, Iterator

import numpy as np

from . import analysis
from . import attention as attn
from .backbone import (ModelConfig, SkffWeights, backbone_forward, init_params, pixel_shuffle, pixel_unshuffle,
                       skff_fuse, zero_residual_head)
from .embedding import DeformableEmbedConfig, DsdcnWeights, dcn_macs, dsdcn_forward, dsdcn_macs, \
    separable_conv_reference
from .tensor_core import make_rng, rank_estimate

SUITES = ("kernel", "gradients", "embedding", "backbone")


def _rec(suite, check, passed, value, limit) -> dict:
    return {"suite": suite, "check": check, "passed": bool(passed), "value": f"{value:.6e}", "limit": f"{limit:.1e}"}


def kernel_suite(seed: int) -> Iterator[dict]:
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(20):
        n, d = int(rng.integers(1, 129)), int(rng.integers(1, 17))
        cfg = attn.AttentionConfig(head_dim=d, focused_factor=float(rng.choice([3, 4, 5])),
                                   modulation=float(rng.choice([0, 0.5, 1])))
        q, k, v = attn.QkvTriple.random(rng, n, d)
        worst = max(worst, np.abs(attn.tmsa_linear(q, k, v, cfg) - attn.tmsa_quadratic_oracle(q, k, v, cfg)).max())
    yield _rec("kernel", "linear_vs_quadratic", worst < 1e-9, worst, 1e-9)

    q, k, v = attn.QkvTriple.random(rng, 48, 4)
    cfg = attn.AttentionConfig(head_dim=4)
    m = attn.dense_attention_map(q, k, cfg)
    dev = np.abs(m.sum(axis=1) - 1).max()
    yield _rec("kernel", "row_sums", dev < 1e-6, dev, 1e-6)
    yield _rec("kernel", "min_weight", m.min() >= 0, m.min(), 0.0)

    phi = attn.phi_p(attn.normalize_rows(q), 4.0)
    yield _rec("kernel", "phi_nonnegative", phi.min() >= 0, phi.min(), 0.0)
    norm_err = np.abs(np.linalg.norm(phi, axis=1) - np.linalg.norm(np.maximum(attn.normalize_rows(q), 0), axis=1)).max()
    yield _rec("kernel", "phi_norm", norm_err < 1e-12, norm_err, 1e-12)

    perm = rng.permutation(48)
    eq = np.abs(attn.tmsa_linear(q[perm], k[perm], v[perm], cfg) - attn.tmsa_linear(q, k, v, cfg)[perm]).max()
    yield _rec("kernel", "permutation_equivariance", eq < 1e-12, eq, 1e-12)

    r = rank_estimate(attn.kernel_map(q, k, cfg))
    yield _rec("kernel", "rank_bound", r <= 2 * 4 + 1, r, 9)

    pcfg = attn.AttentionConfig(head_dim=2, focused_factor=4.0)
    gap = analysis.row_entropy(analysis.probe_map(pcfg, include_remainder=False)) - analysis.row_entropy(
        analysis.probe_map(pcfg))
    yield _rec("kernel", "focusing_entropy_gap", gap > 0, gap, 0.0)


def gradient_suite(seed: int) -> Iterator[dict]:
    rng = make_rng(seed + 1)
    worst = 0.0
    for _ in range(4):
        n, d = int(rng.integers(2, 7)), int(rng.integers(2, 5))
        cfg = attn.AttentionConfig(head_dim=d, modulation=0.5)
        q, k, v = attn.QkvTriple.random(rng, n, d)
        g = rng.standard_normal((n, d))
        worst = max(worst, gradient_error(q, k, v, cfg, g))
    yield _rec("gradients", "tmsa_grad_vs_central_differences", worst < 1e-5, worst, 1e-5)


def gradient_error(q, k, v, cfg, upstream, step: float = 1e-5) -> float:
    """Max abs difference between analytic and central-difference gradients over the largest gradient entry."""
    grads = attn.tmsa_grad(q, k, v, cfg, upstream)

    def objective(qq, kk, vv):
        return float(np.sum(upstream * attn.tmsa_linear(qq, kk, vv, cfg)))

    num, den = 0.0, 0.0
    inputs = [q, k, v]
    for which, analytic in enumerate(grads[:3]):
        for idx in np.ndindex(q.shape):
            plus = [x.copy() for x in inputs]
            minus = [x.copy() for x in inputs]
            plus[which][idx] += step
            minus[which][idx] -= step
            fd = (objective(*plus) - objective(*minus)) / (2 * step)
            num = max(num, abs(fd - analytic[idx]))
            den = max(den, abs(fd))
    return num / max(den, 1e-12)


def embedding_suite(seed: int) -> Iterator[dict]:
    rng = make_rng(seed + 2)
    cfg = DeformableEmbedConfig(6, 5)
    w = DsdcnWeights.init(rng, cfg, std=0.5)
    x = rng.standard_normal((6, 12, 12))
    err = np.abs(dsdcn_forward(x, w, cfg) - separable_conv_reference(x, w, cfg)).max()
    yield _rec("embedding", "zero_offset_equivalence", err < 1e-10, err, 1e-10)

    w = DsdcnWeights.init(rng, cfg, std=0.5, offset_std=10.0)
    record: list = []
    dsdcn_forward(x, w, cfg, record=record)
    gy, gx = np.meshgrid(np.arange(12), np.arange(12), indexing="ij")
    disp = max(max(np.abs(ys - gy - ty).max(), np.abs(xs - gx - tx).max()) for ty, tx, ys, xs in record)
    yield _rec("embedding", "offset_clamp", disp <= 3.0, disp, 3.0)

    radius = analysis.locality_radius(3.0, size=15, seed=seed)
    yield _rec("embedding", "locality_window_radius", radius <= 4, radius, 4)
    ok = dsdcn_macs(24, 3, 8, 8) == 147456 and dcn_macs(24, 3, 8, 8) == 635904
    yield _rec("embedding", "mac_formulas", ok, dsdcn_macs(24, 3, 8, 8), 147456)


def backbone_suite(seed: int) -> Iterator[dict]:
    rng = make_rng(seed + 3)
    x = rng.standard_normal((5, 8, 12))
    rt = np.abs(pixel_shuffle(pixel_unshuffle(x, 2), 2) - x).max()
    yield _rec("backbone", "shuffle_round_trip", rt == 0, rt, 0.0)

    feats = [rng.standard_normal((6, 4, 4)) for _ in range(2)]
    sk = SkffWeights(rng.standard_normal((4, 6)), [rng.standard_normal((6, 4)) for _ in range(2)])
    fused = skff_fuse(feats, sk)
    lo, hi = np.minimum(*feats), np.maximum(*feats)
    slack = max((lo - fused).max(), (fused - hi).max())
    yield _rec("backbone", "skff_convexity", slack <= 1e-12, slack, 1e-12)

    cfg = ModelConfig.nano()
    params = zero_residual_head(init_params(cfg, seed))
    img = rng.random((3, 32, 32))
    diff = np.abs(backbone_forward(img, cfg, params) - img).max()
    yield _rec("backbone", "residual_identity", diff == 0, diff, 0.0)


_SUITE_FNS: dict[str, Callable[[int], Iterator[dict]]] = {
    "kernel": kernel_suite, "gradients": gradient_suite, "embedding": embedding_suite, "backbone": backbone_suite,
}


def run_suite(name: str, seed: int) -> list[dict]:
    if name == "all":
        names = SUITES
    elif name in _SUITE_FNS:
        names = (name,)
    else:
        raise ValueError(f"unknown suite {name!r}; choose from {SUITES + ('all',)}")
    return [rec for n in names for rec in _SUITE_FNS[n](seed)]


def report_lines(records: list[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
