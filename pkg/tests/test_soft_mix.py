import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from conftest import random_simplex
from synalign.soft_mix import (BlendMask, Rect, blend_images, blend_labels, box_filter, build_blend_mask,
                               make_complementary_mixtures, sample_blend_region, sample_masks)


def test_worked_blend_example():
    out = blend_images(np.full((1, 1, 1), 100.0), np.full((1, 1, 1), 50.0), np.full((1, 1), 0.6))
    assert out[0, 0, 0] == 80.0


def test_blend_image_identities(rng):
    a, b = rng.random((5, 5, 2)), rng.random((5, 5, 2))
    coef = rng.random((5, 5))
    assert np.array_equal(blend_images(a, b, np.ones((5, 5))), a)
    assert np.allclose(blend_images(a, a, coef), a, atol=1e-15)


def test_label_blend_example():
    l1 = np.zeros((4, 1, 1)); l1[1] = 1
    l2 = np.zeros((4, 1, 1)); l2[2] = 1
    out = blend_labels(l1, l2, np.full((1, 1), 0.6))[:, 0, 0]
    assert out == pytest.approx([0, 0.6, 0.4, 0], abs=1e-15)
    assert np.array_equal(blend_labels(l1, l1, np.full((1, 1), 0.3)), l1)


def test_region_sizes():
    r = sample_blend_region(12, 12, 2 / 3, np.random.default_rng(0))
    assert (r.height, r.width) == (8, 8)
    rng = np.random.default_rng(1)
    for _ in range(200):
        r = sample_blend_region(9, 9, 2 / 3, rng)
        assert (r.height, r.width) == (6, 6)
        assert 0 <= r.top <= 3 and 0 <= r.left <= 3


def test_region_position_uniform_chi2():
    rng = np.random.default_rng(2024)
    counts = np.zeros((4, 4))
    for _ in range(100_000):
        r = sample_blend_region(9, 9, 2 / 3, rng)
        counts[r.top, r.left] += 1
    assert stats.chisquare(counts.ravel()).pvalue > 1e-3


def test_region_sequence_deterministic():
    a = [sample_blend_region(64, 64, 2 / 3, np.random.default_rng(7)) for _ in range(1)]
    b = [sample_blend_region(64, 64, 2 / 3, np.random.default_rng(7)) for _ in range(1)]
    assert a == b
    assert np.array_equal(sample_masks(5, 16, 16, 2 / 3, 3, np.random.default_rng(3)),
                          sample_masks(5, 16, 16, 2 / 3, 3, np.random.default_rng(3)))


def test_kernel_one_is_hard_copy_paste():
    m = build_blend_mask(10, 10, Rect(2, 3, 5, 4), kernel=1)
    assert np.array_equal(m.smooth, m.raw)
    assert set(np.unique(m.raw).tolist()) == {0.0, 1.0}


def test_three_by_three_average():
    m = build_blend_mask(10, 10, Rect(2, 2, 6, 6), kernel=3)
    # pixel just outside the hole's left edge, mid-height: 3 zeros, 6 ones
    assert m.smooth[5, 1] == pytest.approx(6 / 9, abs=1e-15)
    assert round(m.smooth[5, 1], 4) == 0.6667


def conv_oracle(raw, k):
    r = k // 2
    h, w = raw.shape
    out = np.zeros_like(raw)
    for y in range(h):
        for x in range(w):
            s = 0.0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    s += raw[min(max(y + dy, 0), h - 1), min(max(x + dx, 0), w - 1)]
            out[y, x] = s / (k * k)
    return out


def test_box_filter_matches_direct_convolution(rng):
    for k in (1, 3, 5):
        x = rng.random((9, 11))
        assert np.allclose(box_filter(x, k), conv_oracle(x, k), atol=1e-14)
    with pytest.raises(ValueError):
        box_filter(x, 2)


def test_interior_exact_zero_one():
    rect = Rect(5, 5, 10, 10)
    m = build_blend_mask(24, 24, rect, kernel=3)
    assert np.array_equal(m.smooth, conv_oracle(m.raw, 3))
    yy, xx = np.mgrid[0:24, 0:24]
    # Chebyshev distance to the nearest pixel on the other side of the rectangle edge
    inside = (yy >= 5) & (yy < 15) & (xx >= 5) & (xx < 15)
    dist_in = np.minimum.reduce([yy - 4, 15 - yy, xx - 4, 15 - xx])
    dy = np.maximum.reduce([5 - yy, yy - 14, np.zeros_like(yy)])
    dx = np.maximum.reduce([5 - xx, xx - 14, np.zeros_like(xx)])
    dist_out = np.maximum(dy, dx)
    far = np.where(inside, dist_in, dist_out) >= 2
    assert set(np.unique(m.smooth[far]).tolist()) <= {0.0, 1.0}
    assert np.all(m.smooth[far & inside] == 0.0) and np.all(m.smooth[far & ~inside] == 1.0)


@settings(max_examples=50, deadline=None)
@given(h=st.integers(3, 20), w=st.integers(3, 20), k=st.sampled_from([1, 3, 5]), seed=st.integers(0, 9999))
def test_smoothing_is_contraction(h, w, k, seed):
    rng = np.random.default_rng(seed)
    m = build_blend_mask(h, w, sample_blend_region(h, w, 2 / 3, rng), k)
    assert m.smooth.min() >= m.raw.min() and m.smooth.max() <= m.raw.max()


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), c=st.integers(2, 5))
def test_mixture_properties(seed, c):
    rng = np.random.default_rng(seed)
    h, w = 12, 10
    mask = build_blend_mask(h, w, sample_blend_region(h, w, 2 / 3, rng), 3)
    v_lab, v_syn = rng.random((h, w, 2)), rng.random((h, w, 2))
    l_lab, l_syn = random_simplex(rng, (c, h, w)), random_simplex(rng, (c, h, w))
    mix = make_complementary_mixtures((v_lab, l_lab), (v_syn, l_syn), mask)
    # complementarity, exact up to one rounding per term
    assert np.max(np.abs(mix.v1 + mix.v2 - (v_lab + v_syn))) <= 1e-12
    assert np.max(np.abs(mix.l1 + mix.l2 - (l_lab + l_syn))) <= 1e-12
    # simplex closure and range preservation
    for l in (mix.l1, mix.l2):
        assert np.all(l >= 0) and np.allclose(l.sum(axis=0), 1.0, atol=1e-7)
    for v in (mix.v1, mix.v2):
        assert v.min() >= 0.0 and v.max() <= 1.0


def test_mixture_sum_exact_for_dyadic_coefficients(rng):
    # with coefficients in {0, 1/2, 1} and dyadic inputs every product is exact
    coef = rng.integers(0, 3, size=(6, 6)) / 2
    v_lab = rng.integers(0, 256, size=(6, 6, 1)) / 256
    v_syn = rng.integers(0, 256, size=(6, 6, 1)) / 256
    l_lab = np.eye(3)[rng.integers(0, 3, size=(6, 6))].transpose(2, 0, 1)
    l_syn = np.eye(3)[rng.integers(0, 3, size=(6, 6))].transpose(2, 0, 1)
    mix = make_complementary_mixtures((v_lab, l_lab), (v_syn, l_syn), coef)
    assert np.array_equal(mix.v1 + mix.v2, v_lab + v_syn)
    assert np.array_equal(mix.l1 + mix.l2, l_lab + l_syn)


def test_all_ones_mask_keeps_direction(rng):
    v_lab, v_syn = rng.random((4, 4, 1)), rng.random((4, 4, 1))
    l = np.ones((2, 4, 4)) / 2
    mix = make_complementary_mixtures((v_lab, l), (v_syn, l), np.ones((4, 4)))
    assert np.array_equal(mix.v1, v_syn) and np.array_equal(mix.v2, v_lab)


def test_mixture_shape_mismatch():
    with pytest.raises(ValueError):
        make_complementary_mixtures((np.zeros((4, 4, 1)), np.zeros((2, 5, 4))),
                                    (np.zeros((4, 4, 1)), np.zeros((2, 4, 4))), np.ones((4, 4)))


def test_blend_mask_object_accepted(rng):
    m = build_blend_mask(8, 8, Rect(1, 1, 5, 5), 3)
    a, b = rng.random((8, 8, 1)), rng.random((8, 8, 1))
    assert isinstance(m, BlendMask)
    assert np.array_equal(blend_images(a, b, m), blend_images(a, b, m.smooth))
