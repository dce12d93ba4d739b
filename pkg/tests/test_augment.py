import colorsys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from simtriplet.augment import (
    AugmentPolicy,
    NormStats,
    apply_policy,
    compute_norm_stats,
    hsv_to_rgb,
    make_pair_views,
    make_triplet,
    resize,
    rgb_to_hsv,
    to_view,
)


def patch(seed=0, size=64):
    return np.random.default_rng(seed).integers(0, 256, (size, size, 3)).astype(np.uint8)


def test_view_shape_and_dtype():
    v = apply_policy(patch(), AugmentPolicy(output_size=24), np.random.default_rng(0))
    assert v.shape == (3, 24, 24) and v.dtype == np.float32


def test_same_generator_state_same_view():
    a = apply_policy(patch(), AugmentPolicy(), np.random.default_rng(7))
    b = apply_policy(patch(), AugmentPolicy(), np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)


def test_disabled_policy_is_resize_and_normalize():
    p = np.full((8, 8, 3), 255, np.uint8)
    v = to_view(p, 4, NormStats((0.5,) * 3, (0.25,) * 3))
    np.testing.assert_allclose(v, 2.0)


def test_normalization_uses_stats():
    p = np.zeros((4, 4, 3), np.uint8)
    p[..., 1] = 51
    v = to_view(p, 4, NormStats((0.0, 0.1, 0.0), (1.0, 0.5, 2.0)))
    np.testing.assert_allclose(v[1], (0.2 - 0.1) / 0.5, rtol=1e-6)


def test_compute_norm_stats():
    p = np.stack([np.zeros((2, 2, 3)), np.full((2, 2, 3), 255)]).astype(np.uint8)
    s = compute_norm_stats(p)
    np.testing.assert_allclose(s.mean, 0.5)
    np.testing.assert_allclose(s.std, 0.5)


def test_triplet_views_differ_but_are_reproducible():
    m1, m2 = patch(1), patch(2)
    t1 = make_triplet(m1, m2, AugmentPolicy(), np.random.default_rng(3))
    t2 = make_triplet(m1, m2, AugmentPolicy(), np.random.default_rng(3))
    np.testing.assert_array_equal(t1.x3, t2.x3)
    assert not np.array_equal(t1.x1, t1.x2)


def test_pair_views_match_first_two_triplet_streams():
    rng_a, rng_b = np.random.default_rng(5), np.random.default_rng(5)
    v1, v2 = make_pair_views(patch(), AugmentPolicy(), rng_a)
    t = make_triplet(patch(), patch(9), AugmentPolicy(), rng_b)
    np.testing.assert_array_equal(v1, t.x1)
    np.testing.assert_array_equal(v2, t.x2)


@pytest.mark.parametrize("field,value", [("flip_prob", 1.5), ("grayscale_prob", -0.1)])
def test_bad_probability_rejected(field, value):
    with pytest.raises(ValueError, match=field):
        AugmentPolicy(**{field: value})


def test_bad_crop_range_rejected():
    with pytest.raises(ValueError):
        AugmentPolicy(crop_scale_range=(0.0, 1.0))


def test_policy_text_round_trip():
    p = AugmentPolicy(output_size=48, hue=0.05, crop_scale_range=(0.3, 0.9))
    assert AugmentPolicy.from_text(p.to_text()) == p


def test_policy_text_unknown_key():
    with pytest.raises(ValueError, match="unknown augmentation key"):
        AugmentPolicy.from_text("zoom=2")


def test_full_flip_mirrors_columns():
    p = patch(4, 8)
    pol = AugmentPolicy.disabled(8)
    pol.flip_prob = 1.0
    np.testing.assert_array_equal(apply_policy(p, pol, np.random.default_rng(0)), to_view(p, 8)[:, :, ::-1])


def test_grayscale_makes_channels_equal():
    pol = AugmentPolicy.disabled(16)
    pol.grayscale_prob = 1.0
    v = apply_policy(patch(), pol, np.random.default_rng(0), NormStats((0, 0, 0), (1, 1, 1)))
    np.testing.assert_allclose(v[0], v[1])
    np.testing.assert_allclose(v[1], v[2])


def test_resize_constant_image_is_constant():
    x = np.full((10, 10, 3), 0.3)
    for size in (4, 7, 10, 23):
        np.testing.assert_allclose(resize(x, size), 0.3)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (5, 3), elements=st.floats(0, 1)))
def test_hsv_matches_stdlib(x):
    ours = rgb_to_hsv(x)
    for row, h in zip(x, ours):
        ref = colorsys.rgb_to_hsv(*row)
        np.testing.assert_allclose(h[1:], ref[1:], atol=1e-12)
        if ref[1] > 1e-9:
            assert min(abs(h[0] - ref[0]), 1 - abs(h[0] - ref[0])) < 1e-9


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (6, 3), elements=st.floats(0, 1)))
def test_hsv_round_trip(x):
    np.testing.assert_allclose(hsv_to_rgb(rgb_to_hsv(x)), x, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_views_stay_in_normalized_range(seed):
    s = NormStats((0.5,) * 3, (0.25,) * 3)
    v = apply_policy(patch(seed % 97), AugmentPolicy(), np.random.default_rng(seed), s)
    assert v.min() >= -2.0 - 1e-6 and v.max() <= 2.0 + 1e-6
