import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import nadir_camera, random_scene
from roadsurf.losses import (
    LossWeights,
    depth_smoothness_loss,
    normal_consistency_from_buffers,
    normal_consistency_loss,
    photometric_loss,
    photometric_loss_grad,
    semantic_loss,
    semantic_loss_grad,
    total_loss,
)
from roadsurf.rasterizer import Contributions, render


def contribs(rays, height=1, width=None):
    """Contributions from a list of per-ray [(surfel, depth, omega), ...] lists."""
    width = width or len(rays)
    counts = [len(r) for r in rays]
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    flat = [h for r in rays for h in r]
    surf = np.array([h[0] for h in flat], np.int64)
    z = np.array([h[1] for h in flat], float)
    w = np.array([h[2] for h in flat], float)
    zeros = np.zeros(len(flat))
    return Contributions(height, width, offsets, surf, zeros, zeros, z, np.ones(len(flat)), w)


# photometric

def test_photometric_identical_is_zero(rng):
    a = rng.uniform(size=(4, 5, 3))
    assert photometric_loss(a, a, np.ones((4, 5), bool)) == 0.0


def test_photometric_constant_offset():
    a = np.full((3, 3, 3), 0.5)
    assert photometric_loss(a + 0.1, a, np.ones((3, 3), bool)) == pytest.approx(0.3, abs=1e-12)


def test_photometric_mask_excludes_pixel():
    a = np.zeros((2, 2, 3))
    b = a.copy()
    b[0, 0] = 1.0
    mask = np.ones((2, 2), bool)
    mask[0, 0] = False
    assert photometric_loss(a, b, mask) == 0.0


def test_photometric_empty_mask_raises():
    with pytest.raises(ValueError):
        photometric_loss(np.zeros((2, 2, 3)), np.zeros((2, 2, 3)), np.zeros((2, 2), bool))


def test_photometric_symmetric(rng):
    a, b = rng.uniform(size=(2, 6, 6, 3))
    m = rng.uniform(size=(6, 6)) > 0.3
    assert photometric_loss(a, b, m) == photometric_loss(b, a, m)


def test_photometric_smoothed_grad_matches_fd(rng):
    a, b = rng.uniform(size=(2, 3, 3, 3))
    m = np.ones((3, 3), bool)
    _, g = photometric_loss_grad(a, b, m, 1e-3)
    h = 1e-7
    e = np.zeros_like(a)
    e[1, 2, 0] = h
    fd = (photometric_loss(a + e, b, m, 1e-3) - photometric_loss(a - e, b, m, 1e-3)) / (2 * h)
    assert g[1, 2, 0] == pytest.approx(fd, rel=1e-6)


# depth smoothness

def test_depth_equal_depths_zero():
    assert depth_smoothness_loss(contribs([[(0, 2.0, 0.3), (1, 2.0, 0.5), (2, 2.0, 0.1)]])) == 0.0


def test_depth_single_pair():
    assert depth_smoothness_loss(contribs([[(0, 1.0, 1.0), (1, 2.0, 1.0)]])) == 1.0


def test_depth_matches_double_loop(rng):
    rays = [[(i, float(rng.uniform(0, 5)), float(rng.uniform(0, 0.3))) for i in range(int(rng.integers(0, 7)))]
            for _ in range(12)]
    expected = 0.0
    for r in rays:
        for i in range(len(r)):
            for j in range(len(r)):
                if i < j:
                    expected += r[i][2] * r[j][2] * abs(r[i][1] - r[j][1])
    assert depth_smoothness_loss(contribs(rays, 3, 4)) == pytest.approx(expected / 12, rel=1e-12)


def test_depth_order_invariant(rng):
    ray = [(i, float(rng.uniform(0, 5)), float(rng.uniform(0, 0.3))) for i in range(6)]
    a = depth_smoothness_loss(contribs([ray]))
    b = depth_smoothness_loss(contribs([ray[::-1]]))
    assert a == pytest.approx(b, rel=1e-14)


# normal consistency

def _normal_case(n, N):
    c = contribs([[(0, 1.0, 1.0)]])
    valid = np.ones((1, 1), bool)
    return normal_consistency_loss(c, np.array(N, float).reshape(1, 1, 3), valid, np.array([n], float))


def test_normal_aligned_zero():
    assert _normal_case([0, 0, 1.0], [0, 0, 1.0]) == 0.0


def test_normal_perpendicular_one():
    assert _normal_case([1.0, 0, 0], [0, 0, 1.0]) == 1.0


def test_normal_opposite_two():
    assert _normal_case([0, 0, -1.0], [0, 0, 1.0]) == 2.0


def test_normal_buffer_form_matches_hit_form(rng):
    scene = random_scene(rng, 10)
    out = render(scene, nadir_camera(height=2.0, size=16, fx=10.0))
    a = normal_consistency_loss(out.contributions, out.dominant_normal, out.normal_valid, scene.normals())
    b = normal_consistency_from_buffers(out.alpha, out.normal_sum, out.dominant_normal, out.normal_valid)
    assert a == pytest.approx(b, rel=1e-12)
    assert 0.0 <= a <= 2.0


# semantic

def test_semantic_saturated_logits():
    labels = np.array([[0, 2], [1, 1]])
    logits = np.zeros((2, 2, 3))
    np.put_along_axis(logits, labels[..., None], 20.0, axis=-1)
    assert semantic_loss(logits, labels, np.ones((2, 2), bool)) < 1e-6


def test_semantic_uniform_is_log_c():
    assert semantic_loss(np.zeros((2, 3, 5)), np.zeros((2, 3), int), np.ones((2, 3), bool)) \
        == pytest.approx(math.log(5), abs=1e-12)


def test_semantic_matches_direct_oracle(rng):
    logits = rng.normal(size=(4, 4, 6))
    labels = rng.integers(0, 6, (4, 4))
    mask = rng.uniform(size=(4, 4)) > 0.3
    expected = []
    for y in range(4):
        for x in range(4):
            if mask[y, x]:
                l = logits[y, x]
                expected.append(-(l[labels[y, x]] - math.log(sum(math.exp(v) for v in l))))
    assert semantic_loss(logits, labels, mask) == pytest.approx(np.mean(expected), rel=1e-12)


def test_semantic_monotone_in_true_logit(rng):
    logits = rng.normal(size=(3, 3, 4))
    labels = rng.integers(0, 4, (3, 3))
    mask = np.ones((3, 3), bool)
    bumped = logits.copy()
    np.put_along_axis(bumped, labels[..., None], np.take_along_axis(logits, labels[..., None], -1) + 0.5, -1)
    assert semantic_loss(bumped, labels, mask) < semantic_loss(logits, labels, mask)


def test_semantic_grad_matches_fd(rng):
    logits = rng.normal(size=(2, 2, 3))
    labels = rng.integers(0, 3, (2, 2))
    mask = np.ones((2, 2), bool)
    _, g = semantic_loss_grad(logits, labels, mask)
    h = 1e-6
    e = np.zeros_like(logits)
    e[1, 0, 2] = h
    fd = (semantic_loss(logits + e, labels, mask) - semantic_loss(logits - e, labels, mask)) / (2 * h)
    assert g[1, 0, 2] == pytest.approx(fd, rel=1e-6)


def test_semantic_empty_mask_raises():
    with pytest.raises(ValueError):
        semantic_loss(np.zeros((1, 1, 2)), np.zeros((1, 1), int), np.zeros((1, 1), bool))


# total

def test_total_weights():
    assert total_loss(1, 2, 3, 4, LossWeights(0, 0, 0, 0)).total == 0.0
    assert total_loss(1.5, 2, 3, 4, LossWeights(1, 0, 0, 0)).total == 1.5


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 10))
def test_total_linear_in_weights(a, b, c, d):
    w = LossWeights(0.7, 0.2, 0.3, 0.4)
    one = total_loss(a, b, c, d, w)
    two = total_loss(a, b, c, d, w.scaled(2.0))
    assert two.total == pytest.approx(2 * one.total, rel=1e-12, abs=1e-300)
    assert one.total == pytest.approx(0.7 * a + 0.2 * b + 0.3 * c + 0.4 * d, abs=1e-9)


def test_negative_weight_rejected():
    with pytest.raises(ValueError, match="lambda_d"):
        LossWeights(lambda_d=-1.0)
