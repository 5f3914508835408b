import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import naive_depthwise, naive_pointwise
from taylorformer.analysis import locality_radius
from taylorformer.embedding import (DeformableEmbedConfig, DsdcnWeights, branch_configs, compute_offsets,
                                    dcn_macs, dsdcn_forward, dsdcn_macs, embed_branch, multi_scale_patch_embed,
                                    separable_conv_reference)
from taylorformer.layers import hardswish
from taylorformer.tensor_core import ShapeError, bilinear_sample


def test_zero_offsets_match_separable_conv(rng):
    cfg = DeformableEmbedConfig(6, 5)
    w = DsdcnWeights.init(rng, cfg, std=0.5)
    x = rng.standard_normal((6, 12, 12))
    assert np.abs(dsdcn_forward(x, w, cfg) - separable_conv_reference(x, w, cfg)).max() < 1e-10


def test_reference_matches_naive_loops(rng):
    cfg = DeformableEmbedConfig(3, 4, kernel=5)
    w = DsdcnWeights.init(rng, cfg, std=0.5)
    x = rng.standard_normal((3, 7, 9))
    ref = naive_pointwise(naive_depthwise(x, w.value_dw), w.value_pw)
    assert np.abs(separable_conv_reference(x, w, cfg) - ref).max() < 1e-12


@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 3, 5]), st.sampled_from([1, 2]))
def test_zero_offsets_property(seed, k, stride):
    rng = np.random.default_rng(seed)
    cfg = DeformableEmbedConfig(2, 3, kernel=k, stride=stride)
    w = DsdcnWeights.init(rng, cfg, std=1.0)
    x = rng.standard_normal((2, 6, 8))
    assert np.abs(dsdcn_forward(x, w, cfg) - separable_conv_reference(x, w, cfg)).max() < 1e-10


def test_constant_input_interior(rng):
    # with all-zero offsets, interior pixels of a constant image see the plain kernel sum
    cfg = DeformableEmbedConfig(2, 2)
    w = DsdcnWeights.init(rng, cfg, std=1.0)
    out = dsdcn_forward(np.full((2, 6, 6), 2.0), w, cfg)
    expect = w.value_pw @ (2.0 * w.value_dw.sum(axis=(1, 2)))
    assert np.allclose(out[:, 2:4, 2:4], expect[:, None, None], atol=1e-12)


def test_integer_offset_shifts_samples():
    # one tap, offset field fixed by the bias: dy=+1, dx=-1 everywhere
    cfg = DeformableEmbedConfig(1, 1, kernel=1, offset_bound=None)
    w = DsdcnWeights.delta(1, kernel=1)
    w.offset_pw_bias[:] = [1.0, -1.0]
    x = np.arange(25.0).reshape(1, 5, 5)
    out = dsdcn_forward(x, w, cfg)[0]
    assert out[1, 2] == x[0, 2, 1]
    assert out[4, 0] == 0.0  # sample falls off the bottom-left edge


def test_fractional_offset_matches_bilinear(rng):
    cfg = DeformableEmbedConfig(1, 1, kernel=1, offset_bound=None)
    w = DsdcnWeights.delta(1, kernel=1)
    w.offset_pw_bias[:] = [0.25, 0.6]
    x = rng.standard_normal((1, 5, 5))
    out = dsdcn_forward(x, w, cfg)[0]
    assert abs(out[2, 2] - bilinear_sample(x, 2.25, 2.6, 0)) < 1e-14


def test_offsets_clamped(rng):
    cfg = DeformableEmbedConfig(4, 4, offset_bound=2.0)
    w = DsdcnWeights.init(rng, cfg, std=0.5, offset_std=10.0)
    x = rng.standard_normal((4, 10, 10))
    off = compute_offsets(x, w, cfg)
    assert off.shape == (18, 10, 10)
    assert np.abs(off).max() == 2.0
    record: list = []
    dsdcn_forward(x, w, cfg, record=record)
    gy, gx = np.meshgrid(np.arange(10), np.arange(10), indexing="ij")
    for ty, tx, ys, xs in record:
        assert np.abs(ys - gy - ty).max() <= 2.0 and np.abs(xs - gx - tx).max() <= 2.0


@pytest.mark.slow
def test_bounded_offsets_stay_local():
    assert locality_radius(3.0) <= 4


@pytest.mark.slow
def test_unbounded_offsets_reach_further():
    assert locality_radius(None) > 4


def test_delta_stack_is_hardswish_chain(rng):
    x = rng.standard_normal((3, 6, 6))
    cfg = DeformableEmbedConfig(3, 3, depth=2)
    out = embed_branch(x, [DsdcnWeights.delta(3), DsdcnWeights.delta(3)], cfg)
    assert np.abs(out - hardswish(hardswish(x))).max() < 1e-15


def test_multi_scale_shapes(rng):
    cfgs = branch_configs(3, 8, 3, stride=2)
    weights = [[DsdcnWeights.init(rng, c.layer(i)) for i in range(c.depth)] for c in cfgs]
    outs = multi_scale_patch_embed(rng.standard_normal((3, 16, 12)), cfgs, weights)
    assert [o.shape for o in outs] == [(8, 8, 6)] * 3


def test_multi_scale_rejects_bad_depths(rng):
    cfgs = [DeformableEmbedConfig(2, 2, depth=2), DeformableEmbedConfig(2, 2, depth=1)]
    with pytest.raises(ValueError):
        multi_scale_patch_embed(np.zeros((2, 4, 4)), cfgs, [[], []])


def test_shape_errors(rng):
    cfg = DeformableEmbedConfig(2, 2)
    w = DsdcnWeights.init(rng, cfg)
    with pytest.raises(ShapeError):
        dsdcn_forward(np.zeros((3, 4, 4)), w, cfg)
    with pytest.raises(ValueError):
        DeformableEmbedConfig(2, 2, kernel=4)


def test_mac_examples():
    assert dsdcn_macs(24, 3, 8, 8) == 147456
    assert dcn_macs(24, 3, 8, 8) == 635904
    assert dsdcn_macs(1, 1, 1, 1) == 9
    assert dcn_macs(1, 1, 1, 1) == 7


def test_mac_overflow_and_validation():
    with pytest.raises(OverflowError):
        dsdcn_macs(2**20, 3, 2**20, 2**20)
    with pytest.raises(ValueError):
        dcn_macs(0, 3, 4, 4)


@given(st.integers(1, 512), st.sampled_from([3, 5, 7]), st.integers(1, 256), st.integers(1, 256))
def test_dsdcn_cheaper_than_dcn(d, k, h, w):
    assert dsdcn_macs(d, k, h, w) < dcn_macs(d, k, h, w)
