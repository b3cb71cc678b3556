import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import zscore
from skimage.color import rgb2lab

from gaa.features import (
    FeatureBlock,
    fuse_features,
    lab_stats,
    lbp_codes,
    lbp_histogram,
    luma,
    srgb_to_lab,
    uniform_lbp_table,
)


def _img(rows):
    return np.asarray(rows, dtype=np.uint8)


# -- LAB ------------------------------------------------------------------------

def test_lab_white_black():
    white = np.full((3, 3, 3), 255, np.uint8)
    mask = np.ones((3, 3), bool)
    s = lab_stats(white, mask)
    assert s[0] == pytest.approx(100.0, abs=1e-9)
    assert np.allclose(s[1:3], 0.0, atol=1e-9) and np.all(s[3:] == 0)
    assert np.allclose(lab_stats(np.zeros((3, 3, 3), np.uint8), mask), 0.0, atol=1e-12)


def test_lab_two_pixel_population_std():
    img = _img([[[255, 255, 255], [0, 0, 0]]])
    s = lab_stats(img, np.ones((1, 2), bool))
    assert s[0] == pytest.approx(50.0, abs=1e-9)
    assert s[3] == pytest.approx(50.0, abs=1e-9)


def test_lab_matches_skimage():
    rgb = np.random.default_rng(1).random((40, 40, 3))
    ours = srgb_to_lab(rgb)
    ref = rgb2lab(rgb)
    # reference whites differ in the fifth decimal
    assert np.max(np.abs(ours - ref)) < 5e-3


def test_lab_empty_mask_and_shape_errors():
    with pytest.raises(ValueError, match="non-empty"):
        lab_stats(np.zeros((2, 2, 3), np.uint8), np.zeros((2, 2), bool))
    with pytest.raises(ValueError, match="differ"):
        lab_stats(np.zeros((2, 2, 3), np.uint8), np.ones((3, 2), bool))


# -- LBP ------------------------------------------------------------------------

def _bilinear(gray, y, x):
    y0, x0 = math.floor(y), math.floor(x)
    fy, fx = y - y0, x - x0
    v = 0.0
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            if wy * wx:
                v += wy * wx * gray[y0 + dy, x0 + dx]
    return v


def _brute_codes(gray, p=8, r=1.0):
    h, w = gray.shape
    out = np.full((h, w), -1)
    for y in range(1, h - 1):
        for x in range(1, w - 1):
            code = 0
            for k in range(p):
                t = 2 * math.pi * k / p
                sx = x + r * math.cos(t)
                sy = y - r * math.sin(t)
                sx = round(sx) if abs(sx - round(sx)) < 1e-9 else sx
                sy = round(sy) if abs(sy - round(sy)) < 1e-9 else sy
                if _bilinear(gray, sy, sx) >= gray[y, x]:
                    code |= 1 << k
            out[y, x] = code
    return out


def test_uniform_table_has_59_bins():
    t = uniform_lbp_table(8)
    assert t.max() + 1 == 59
    assert np.count_nonzero(t < 58) == 58


def test_lbp_constant_image_all_ones_code():
    img = np.full((6, 6, 3), 90, np.uint8)
    h = lbp_histogram(img, np.ones((6, 6), bool))
    assert h[uniform_lbp_table(8)[255]] == 1.0 and h.sum() == 1.0


def test_lbp_border_only_mask_is_zero():
    img = np.random.default_rng(0).integers(0, 256, (6, 6, 3), dtype=np.uint8)
    mask = np.zeros((6, 6), bool)
    mask[0, :] = mask[:, 0] = True
    assert not lbp_histogram(img, mask).any()


def test_lbp_step_edge_matches_brute_force():
    img = np.zeros((7, 7, 3), np.uint8)
    img[:, 4:] = 200
    mask = np.zeros((7, 7), bool)
    mask[2:5, 2:5] = True
    gray = luma(img, scaled=False)
    brute = _brute_codes(gray)
    assert np.array_equal(lbp_codes(gray), brute)
    table = uniform_lbp_table(8)
    expected = np.bincount(table[brute[mask]], minlength=59) / mask.sum()
    assert np.allclose(lbp_histogram(img, mask), expected, atol=0)


def test_lbp_random_codes_match_brute_force():
    gray = luma(np.random.default_rng(3).integers(0, 256, (9, 9, 3), dtype=np.uint8), scaled=False)
    assert np.array_equal(lbp_codes(gray), _brute_codes(gray))


_small_img = arrays(np.uint8, (8, 8, 3), elements=st.integers(0, 80))
_mask = arrays(bool, (8, 8)).filter(lambda m: m.any())


@settings(max_examples=60, deadline=None)
@given(_small_img, _mask, st.integers(1, 3), st.integers(0, 10))
def test_lbp_invariant_to_positive_affine(img, mask, gain, offset):
    remapped = (img.astype(np.int64) * gain + offset).astype(np.uint8)
    assert np.array_equal(lbp_histogram(img, mask), lbp_histogram(remapped, mask))


@settings(max_examples=60, deadline=None)
@given(_small_img, _mask, _small_img)
def test_descriptors_ignore_pixels_outside_mask(img, mask, other):
    # pixels outside the dilated mask cannot enter any masked neighborhood
    grown = mask.copy()
    grown[1:, :] |= mask[:-1, :]
    grown[:-1, :] |= mask[1:, :]
    grown[:, 1:] |= grown[:, :-1].copy()
    grown[:, :-1] |= grown[:, 1:].copy()
    changed = np.where(grown[..., None], img, other)
    assert np.array_equal(lab_stats(img, mask), lab_stats(changed, mask))
    # LBP reads the 8-neighborhood, LAB only the mask itself
    changed_lab = np.where(mask[..., None], img, other)
    assert np.array_equal(lab_stats(img, mask), lab_stats(changed_lab, mask))
    assert np.array_equal(lbp_histogram(img, mask), lbp_histogram(changed, mask))


# -- fusion -----------------------------------------------------------------------

def test_fuse_zero_weight_annihilates():
    rng = np.random.default_rng(0)
    out = fuse_features([FeatureBlock("a", rng.random((5, 2)), 1.0), FeatureBlock("b", rng.random((5, 3)), 0.0)])
    assert out.shape == (5, 5) and not out[:, 2:].any()


def test_fuse_single_block_is_zscore():
    x = np.random.default_rng(0).random((6, 3))
    assert np.allclose(fuse_features([FeatureBlock("a", x, 2.5)]), zscore(x, axis=0), atol=1e-12)


def test_fuse_hand_example():
    out = fuse_features([FeatureBlock("a", [0.0, 2.0], 1.0), FeatureBlock("b", [10.0, 30.0], 1.0)])
    assert out.tolist() == [[-0.5, -0.5], [0.5, 0.5]]


def test_fuse_constant_column_is_zero_and_errors():
    out = fuse_features([FeatureBlock("a", [[1.0, 3.0], [1.0, 5.0]])])
    assert out[:, 0].tolist() == [0.0, 0.0]
    with pytest.raises(ValueError, match="rows"):
        fuse_features([FeatureBlock("a", np.ones((2, 1))), FeatureBlock("b", np.ones((3, 1)))])
    with pytest.raises(ValueError, match="zero"):
        fuse_features([FeatureBlock("a", np.ones((2, 1)), 0.0)])
    with pytest.raises(ValueError, match="non-finite"):
        FeatureBlock("a", [[np.nan]])


@settings(max_examples=80, deadline=None)
@given(
    arrays(np.float64, (7, 3), elements=st.floats(-100, 100)),
    arrays(np.float64, (7, 2), elements=st.floats(-100, 100)),
    st.floats(0.1, 50), st.floats(-100, 100), st.floats(0.1, 50), st.floats(-100, 100),
)
def test_fuse_invariant_to_blockwise_affine(a, b, sa, ta, sb, tb):
    # keep clear of columns that are constant up to rounding
    for m in (a, b):
        if np.any(np.ptp(m, axis=0) < 1e-3):
            return
    ref = fuse_features([FeatureBlock("a", a, 1.0), FeatureBlock("b", b, 0.5)])
    out = fuse_features([FeatureBlock("a", a * sa + ta, 1.0), FeatureBlock("b", b * sb + tb, 0.5)])
    assert np.allclose(out, ref, atol=1e-7)
