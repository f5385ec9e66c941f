import numpy as np
import pytest

from helpers import nadir_camera
from roadsurf.occlusion import (
    DatasetError,
    OcclusionConfig,
    build_occluder_mask,
    build_supervision,
    supervision_target,
)
from roadsurf.scene import Frame

CLASSES = ["road", "lane_marking", "vehicle", "pedestrian", "rider", "bicycle", "sky"]
ROAD, VEHICLE, SKY = 0, 2, 6


def test_no_occluders_all_false():
    m = build_occluder_mask(np.zeros((6, 6), int), [VEHICLE], 3)
    assert not m.mask.any() and m.provenance == "derived-from-labels"


def test_all_occluders_all_true():
    assert build_occluder_mask(np.full((6, 6), VEHICLE), [VEHICLE], 2).mask.all()


@pytest.mark.parametrize("where", [(5, 5), (0, 0), (1, 9)])
def test_single_pixel_matches_neighbourhood_scan(where):
    labels = np.zeros((11, 11), int)
    labels[where] = VEHICLE
    got = build_occluder_mask(labels, [VEHICLE], 2).mask
    expect = np.zeros_like(got)
    for i in range(11):
        for j in range(11):
            for di in range(-2, 3):
                for dj in range(-2, 3):
                    if di * di + dj * dj <= 4 and 0 <= i + di < 11 and 0 <= j + dj < 11:
                        expect[i, j] |= labels[i + di, j + dj] == VEHICLE
    np.testing.assert_array_equal(got, expect)


def test_radius_zero_is_label_mask(rng):
    labels = rng.integers(0, 4, (9, 9))
    np.testing.assert_array_equal(build_occluder_mask(labels, [2, 3], 0).mask, np.isin(labels, [2, 3]))


def _frame(labels, inpainted=True, mask=None):
    h, w = labels.shape
    img = np.full((h, w, 3), 0.2)
    return Frame("0000", img, nadir_camera(size=w), labels,
                 inpainted_image=np.full((h, w, 3), 0.7) if inpainted else None, occluder_mask=mask)


def _labels():
    labels = np.full((10, 10), ROAD)
    labels[:3] = SKY
    labels[5:8, 4:7] = VEHICLE
    return labels


def test_inpainted_has_priority():
    labels = _labels()
    target, valid = supervision_target(_frame(labels), CLASSES)
    assert np.all(target == 0.7)
    np.testing.assert_array_equal(valid, labels != SKY)


def test_raw_image_masks_occluders_exactly():
    labels = np.full((10, 10), ROAD)
    labels[:3] = VEHICLE  # 30% of the frame
    cfg = OcclusionConfig(dilation_radius=0)
    target, valid = supervision_target(_frame(labels, inpainted=False), CLASSES, cfg)
    assert np.all(target == 0.2)
    np.testing.assert_array_equal(valid, labels != VEHICLE)
    assert valid.mean() == pytest.approx(0.7)


def test_toggle_off_uses_raw_image():
    labels = _labels()
    cfg = OcclusionConfig(use_inpainted=False, dilation_radius=1)
    target, valid = supervision_target(_frame(labels), CLASSES, cfg)
    assert np.all(target == 0.2)
    occ = build_occluder_mask(labels, [VEHICLE], 1).mask
    np.testing.assert_array_equal(valid, ~occ & (labels != SKY))


def test_semantic_mask_excludes_occluders_even_when_inpainted():
    labels = _labels()
    sup = build_supervision(_frame(labels), CLASSES)
    assert not sup.semantic_valid[labels == VEHICLE].any()
    assert sup.valid[labels == VEHICLE].all()


def test_mask_file_takes_precedence():
    labels = _labels()
    given = np.zeros((10, 10), bool)
    given[0, 0] = True
    cfg = OcclusionConfig(use_inpainted=False, non_ground_classes=())
    _, valid = supervision_target(_frame(labels, inpainted=False, mask=given), CLASSES, cfg)
    np.testing.assert_array_equal(valid, ~given)


def test_enhanced_overrides_target():
    labels = _labels()
    enhanced = {"0000": np.full((10, 10, 3), 0.9)}
    target, _ = supervision_target(_frame(labels), CLASSES, enhanced=enhanced)
    assert np.all(target == 0.9)
    with pytest.raises(DatasetError, match="enhanced image missing"):
        supervision_target(_frame(labels), CLASSES, enhanced={})


def test_errors():
    with pytest.raises(DatasetError, match="unknown class"):
        supervision_target(_frame(_labels()), ["road"])
    with pytest.raises(DatasetError, match="excludes every pixel"):
        supervision_target(_frame(np.full((4, 4), SKY)), CLASSES)
