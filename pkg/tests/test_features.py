import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import glcm_counts, glcm_props

from hact.features import (
    FEATURE_NAMES,
    GLCM_LEVELS,
    GLCM_OFFSETS,
    N_HANDCRAFTED,
    glcm,
    glcm_properties,
    handcrafted_features,
    quantize,
)

IDX = {name: i for i, name in enumerate(FEATURE_NAMES)}


def _disk_mask(shape, center, radius):
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]]
    return (yy - center[0]) ** 2 + (xx - center[1]) ** 2 <= radius**2


def test_feature_vector_has_sixteen_named_entries():
    assert N_HANDCRAFTED == 16 == len(set(FEATURE_NAMES))


def test_constant_patch_glcm():
    props = glcm_properties(np.full((9, 9), 7, np.int64))
    np.testing.assert_allclose(props, [0.0, 1.0, 1.0, 1.0])


def test_constant_image_texture_features():
    img = np.full((40, 40, 3), 120, np.uint8)
    f = handcrafted_features(img, _disk_mask((40, 40), (20, 20), 6), patch_size=20)
    assert f[IDX["intensity_std"]] == 0.0
    assert f[IDX["skewness"]] == 0.0
    assert f[IDX["glcm_dissimilarity"]] == 0.0
    assert f[IDX["glcm_homogeneity"]] == pytest.approx(1.0)
    assert f[IDX["glcm_energy"]] == pytest.approx(1.0)


def test_filled_circle_is_round_and_convex():
    img = np.full((80, 80, 3), 200, np.uint8)
    f = handcrafted_features(img, _disk_mask((80, 80), (40, 40), 20))
    assert f[IDX["eccentricity"]] < 0.05
    assert f[IDX["solidity"]] > 0.95  # hull is traced through pixel corners


def test_doubling_scale_quadruples_area():
    img = np.full((120, 120, 3), 200, np.uint8)
    small = handcrafted_features(img, _disk_mask((120, 120), (60, 60), 12))
    big = handcrafted_features(img, _disk_mask((120, 120), (60, 60), 24))
    assert big[IDX["area"]] / small[IDX["area"]] == pytest.approx(4.0, rel=0.05)
    assert big[IDX["major_axis_length"]] / small[IDX["major_axis_length"]] == pytest.approx(2.0, rel=0.05)


def test_single_pixel_mask_convention():
    img = np.full((10, 10, 3), 90, np.uint8)
    mask = np.zeros((10, 10), bool)
    mask[4, 4] = True
    f = handcrafted_features(img, mask)
    assert f[IDX["area"]] == 1.0
    assert f[IDX["solidity"]] == 1.0
    assert f[IDX["eccentricity"]] == 0.0
    assert f[IDX["pixel_count"]] == 1.0
    assert np.all(np.isfinite(f))


def test_empty_mask_raises():
    with pytest.raises(ValueError):
        handcrafted_features(np.zeros((5, 5, 3), np.uint8), np.zeros((5, 5), bool))


def test_dark_nucleus_has_negative_contrast():
    img = np.full((30, 30, 3), 220, np.uint8)
    mask = _disk_mask((30, 30), (15, 15), 4)
    img[mask] = 40
    f = handcrafted_features(img, mask, patch_size=20)
    assert f[IDX["fg_bg_difference"]] < -100


def test_quantize_range():
    q = quantize(np.array([0.0, 7.99, 8.0, 255.0, 300.0]))
    np.testing.assert_array_equal(q, [0, 0, 1, 31, 31])


@settings(max_examples=20)
@given(st.integers(0, 2**31), st.integers(1, 12), st.integers(1, 12))
def test_glcm_matches_brute_force_oracle(seed, h, w):
    rng = np.random.default_rng(seed)
    q = rng.integers(0, GLCM_LEVELS, (h, w))
    for off in GLCM_OFFSETS:
        np.testing.assert_array_equal(glcm(q, off), np.array(glcm_counts(q.tolist(), off, GLCM_LEVELS)))
    if h > 1 or w > 1:
        np.testing.assert_allclose(glcm_properties(q), glcm_props(q.tolist(), GLCM_OFFSETS, GLCM_LEVELS), atol=1e-12)


def test_features_are_deterministic(rng):
    img = rng.integers(0, 256, (50, 50, 3)).astype(np.uint8)
    mask = _disk_mask((50, 50), (25, 20), 7)
    np.testing.assert_array_equal(handcrafted_features(img, mask), handcrafted_features(img, mask))
