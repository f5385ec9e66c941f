import colorsys
import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from roadsurf.enhancement import (
    ClassStats,
    class_stats,
    compute_reference_stats,
    enhance_frame,
    enhance_hsv,
    hsv_to_rgb,
    rgb_to_hsv,
    transfer_channel,
)


def test_pure_red_and_gray():
    np.testing.assert_allclose(rgb_to_hsv(np.array([1.0, 0.0, 0.0])), [0.0, 1.0, 1.0])
    np.testing.assert_allclose(rgb_to_hsv(np.array([0.5, 0.5, 0.5])), [0.0, 0.0, 0.5])


def test_matches_colorsys(rng):
    rgb = rng.random((500, 3))
    ours = rgb_to_hsv(rgb)
    ref = np.array([colorsys.rgb_to_hsv(*px) for px in rgb])
    np.testing.assert_allclose(ours[:, 0], ref[:, 0] * 360.0, atol=1e-9)
    np.testing.assert_allclose(ours[:, 1:], ref[:, 1:], atol=1e-12)


@given(arrays(np.float64, (64, 3), elements=st.floats(0.0, 1.0)))
def test_round_trip(rgb):
    np.testing.assert_allclose(hsv_to_rgb(rgb_to_hsv(rgb)), rgb, atol=1e-6)


def test_hue_range(rng):
    h = rgb_to_hsv(rng.random((1000, 3)))[:, 0]
    assert h.min() >= 0.0 and h.max() < 360.0


def test_constant_region_stats():
    hsv = np.zeros((4, 4, 3))
    hsv[..., 2] = 0.4
    s = class_stats(hsv, np.zeros((4, 4), int), 0)
    assert s.value_mean == pytest.approx(0.4) and s.value_std == 0.0 and s.pixel_count == 16


def test_two_point_population_std():
    hsv = np.zeros((1, 2, 3))
    hsv[0, :, 2] = [0.2, 0.6]
    s = class_stats(hsv, np.zeros((1, 2), int), 0)
    assert s.value_mean == pytest.approx(0.4) and s.value_std == pytest.approx(0.2)


def test_absent_class():
    s = class_stats(np.zeros((2, 2, 3)), np.zeros((2, 2), int), 5)
    assert not s.present and s.pixel_count == 0 and np.isnan(s.value_mean)
    assert isinstance(ClassStats.absent(1), ClassStats)


def test_valid_mask_restricts_stats():
    hsv = np.zeros((1, 3, 3))
    hsv[0, :, 2] = [0.1, 0.5, 0.9]
    s = class_stats(hsv, np.zeros((1, 3), int), 0, np.array([[True, False, True]]))
    assert s.pixel_count == 2 and s.value_mean == pytest.approx(0.5)


def test_transfer_examples():
    x = np.linspace(0.1, 0.9, 9)
    np.testing.assert_allclose(transfer_channel(x, (0.4, 0.1), (0.4, 0.1)), x)
    assert transfer_channel(np.array([0.5]), (0.5, 0.1), (0.3, 0.05))[0] == pytest.approx(0.3)
    assert transfer_channel(np.array([0.6]), (0.5, 0.1), (0.4, 0.2))[0] == pytest.approx(0.6)
    assert transfer_channel(np.array([0.9]), (0.5, 0.1), (0.5, 0.5))[0] == 1.0


def test_transfer_degenerate_std_is_noop(caplog):
    x = np.array([0.3, 0.3])
    with caplog.at_level(logging.WARNING):
        out = transfer_channel(x, (0.3, 0.0), (0.6, 0.1))
    np.testing.assert_array_equal(out, x)
    assert "std" in caplog.text


def _flat(v, n=(4, 4), s=0.2):
    return hsv_to_rgb(np.stack([np.full(n, 30.0), np.full(n, s), np.full(n, v)], -1))


def test_reference_single_frame_equals_frame_stats(rng):
    rgb = rng.random((6, 6, 3))
    labels = rng.integers(0, 2, (6, 6))
    ref = compute_reference_stats([(rgb, labels, None)], [0, 1])
    for c in (0, 1):
        s = class_stats(rgb_to_hsv(rgb), labels, c)
        assert ref[c].value_mean == pytest.approx(s.value_mean)
        assert ref[c].sat_std == pytest.approx(s.sat_std)
        assert ref[c].view_count == 1


def test_reference_equal_counts_average():
    labels = np.zeros((4, 4), int)
    ref = compute_reference_stats([(_flat(0.3), labels, None), (_flat(0.5), labels, None)], [0])
    assert ref[0].value_mean == pytest.approx(0.4)


def test_reference_unequal_counts_weighted(rng):
    views = []
    acc = {"n": 0, "sum": 0.0}
    for k in range(3):
        rgb = rng.random((5, 5, 3))
        labels = (rng.random((5, 5)) < 0.2 + 0.3 * k).astype(int)
        views.append((rgb, labels, None))
        v = rgb_to_hsv(rgb)[..., 2][labels == 1]
        acc["n"] += v.size
        acc["sum"] += v.size * v.mean()
    ref = compute_reference_stats(views, [1])
    assert ref[1].pixel_count == acc["n"]
    assert ref[1].value_mean == pytest.approx(acc["sum"] / acc["n"], rel=1e-12)


def test_reference_omits_unseen_class_and_rejects_empty():
    ref = compute_reference_stats([(_flat(0.5), np.zeros((4, 4), int), None)], [0, 3])
    assert 3 not in ref
    with pytest.raises(ValueError):
        compute_reference_stats([], [0])


def test_empty_class_list_is_identity(rng):
    rgb = rng.random((8, 8, 3))
    out = enhance_frame(rgb, np.zeros((8, 8), int), {}, [])
    np.testing.assert_allclose(out, rgb, atol=1e-6)


def test_already_matching_frame_unchanged(rng):
    rgb = rng.random((8, 8, 3))
    labels = rng.integers(0, 3, (8, 8))
    ref = compute_reference_stats([(rgb, labels, None)], [0, 1])
    out = enhance_frame(rgb, labels, ref, [0, 1])
    np.testing.assert_allclose(out, rgb, atol=1e-6)


def test_hue_untouched_and_other_classes_bitwise(rng):
    rgb = rng.random((10, 10, 3))
    labels = rng.integers(0, 3, (10, 10))
    dark = compute_reference_stats([(rgb * 0.5, labels, None)], [0, 1])
    before, after = enhance_hsv(rgb, labels, dark, [0, 1])
    np.testing.assert_array_equal(before[..., 0], after[..., 0])
    out = enhance_frame(rgb, labels, dark, [0, 1])
    np.testing.assert_array_equal(out[labels == 2], rgb[labels == 2])
    assert not np.allclose(out[labels == 0], rgb[labels == 0])


def test_enhancement_equalizes_gain_varied_views(rng):
    base = rng.uniform(0.3, 0.6, (12, 12, 3))
    labels = np.zeros((12, 12), int)
    views = [np.clip(base * g, 0, 1) for g in (0.7, 1.0, 1.3)]
    ref = compute_reference_stats([(v, labels, None) for v in views], [0])
    before = np.std([rgb_to_hsv(v)[..., 2].mean() for v in views])
    after = np.std([rgb_to_hsv(enhance_frame(v, labels, ref, [0]))[..., 2].mean() for v in views])
    assert after <= before * 0.01
