import numpy as np
import pytest

from helpers import nadir_camera
from roadsurf.synthdata import (
    MARKING,
    ROAD,
    SKY,
    VEHICLE,
    SpecError,
    add_lighting_variation,
    add_occluders,
    build_dataset,
    generate_scene,
    heldout_ids,
    merge_spec,
    render_gt_views,
)

SMALL = {"camera": {"width": 24, "height": 24, "fx": 16.0},
         "trajectory": {"count": 4, "heldout_every": 2}}


def test_flat_profile_is_zero():
    scene = generate_scene({"elevation": {"kind": "flat", "z0": 0.0}})
    x, y = np.meshgrid(np.linspace(-5, 15, 7), np.linspace(-4, 4, 5))
    np.testing.assert_array_equal(scene.elevation(x, y), 0.0)


def test_ramp_profile():
    scene = generate_scene({"elevation": {"kind": "ramp", "z0": 0.0, "gradient": 0.02}})
    assert scene.elevation(np.array([10.0]))[0] == pytest.approx(0.2)


def test_stripe_labels_inside_declared_bands():
    spec = {"texture": {"stripes": [{"y": 0.5, "width": 0.2}]}}
    scene = generate_scene(spec)
    y = np.linspace(-1.0, 1.0, 2001)
    lab = scene.label(np.full_like(y, 3.0), y)
    np.testing.assert_array_equal(lab == MARKING, np.abs(y - 0.5) <= 0.1)


def test_dashed_stripe_alternates():
    scene = generate_scene({"texture": {"stripes": [{"y": 0.0, "width": 0.2, "dash": 1.0, "gap": 1.0}]}})
    lab = scene.label(np.array([0.5, 1.5, 2.5, 3.5]), np.zeros(4))
    np.testing.assert_array_equal(lab, [MARKING, ROAD, MARKING, ROAD])


def test_nadir_depth_is_camera_height():
    scene = generate_scene({"elevation": {"kind": "flat", "z0": 0.0}})
    cam = nadir_camera(height=2.5, size=16, fx=12.0)
    cam.translation = np.array([3.0, 0.0, 2.5])
    (frame,) = render_gt_views(scene, [cam])
    np.testing.assert_allclose(frame.depth, 2.5, rtol=1e-12)


def test_pixel_over_stripe_gets_marking():
    scene = generate_scene({"texture": {"stripes": [{"y": 0.0, "width": 0.4}]}})
    cam = nadir_camera(height=2.0, size=15, fx=10.0)
    cam.translation = np.array([3.0, 0.0, 2.0])
    (frame,) = render_gt_views(scene, [cam])
    assert frame.label_map[7, 7] == MARKING
    np.testing.assert_allclose(frame.image[7, 7], np.round(scene.color(3.0, 0.0) * 255) / 255)


def test_sinusoid_depth_matches_fine_march():
    spec = {"elevation": {"kind": "sinusoid", "z0": 0.0, "amplitude": 0.2, "wavelength": 2.0}}
    scene = generate_scene(spec)
    rng = np.random.default_rng(3)
    o = np.tile([0.0, 0.0, 1.5], (20, 1))
    d = np.stack([rng.uniform(0.5, 3.0, 20), rng.uniform(-0.5, 0.5, 20), -np.ones(20)], 1)
    t = scene.intersect(o, d)
    # brute force: fine uniform march, then linear interpolation on the first sign change
    ts = np.linspace(0.0, 3.0, 300001)
    for k in range(20):
        p = o[k] + ts[:, None] * d[k]
        gap = p[:, 2] - scene.elevation(p[:, 0])
        i = np.argmax(gap <= 0)
        t0, t1, g0, g1 = ts[i - 1], ts[i], gap[i - 1], gap[i]
        ref = t0 + (t1 - t0) * g0 / (g0 - g1)
        assert abs(t[k] - ref) * np.linalg.norm(d[k]) < 1e-4


def test_sky_above_horizon():
    ds = build_dataset({**SMALL, "camera": {"width": 24, "height": 24, "fx": 16.0, "pitch_deg": 0.0}})
    top = ds.frames[0].label_map[0]
    assert np.all(top == SKY)
    assert np.all(np.isinf(ds.frames[0].depth[0]))


def test_same_seed_identical_and_seed_changes_texture():
    a, b = build_dataset(SMALL), build_dataset(SMALL)
    for fa, fb in zip(a.frames, b.frames):
        np.testing.assert_array_equal(fa.image, fb.image)
    c = build_dataset({**SMALL, "seed": 5})
    assert not np.array_equal(a.frames[0].image, c.frames[0].image)


@pytest.mark.parametrize("bad,msg", [
    ({"extent": {"x": [5.0, 1.0]}}, "extent.x"),
    ({"texture": {"stripes": [{"y": 0, "width": -1}]}}, "width"),
    ({"elevation": {"kind": "cliff"}}, "elevation.kind"),
    ({"camera": {"fx": 0.0}}, "intrinsics"),
    ({"trajectory": {"count": 0}}, "count"),
    ({"lighting": {"gain": [0.0, 1.0]}}, "gain"),
])
def test_invalid_specs_rejected(bad, msg):
    with pytest.raises(SpecError, match=msg):
        merge_spec(bad)


def test_heldout_ids():
    assert heldout_ids(merge_spec({"trajectory": {"count": 24, "heldout_every": 6}})) == \
        ["0003", "0009", "0015", "0021"]
    assert heldout_ids(merge_spec({"trajectory": {"heldout_every": 0}})) == []


def _flat_frames():
    scene = generate_scene({"elevation": {"kind": "flat", "z0": 0.0}})
    cam = nadir_camera(height=3.0, size=24, fx=16.0)
    cam.translation = np.array([2.0, 0.0, 3.0])
    return scene, render_gt_views(scene, [cam])


def test_no_occluders_leaves_dataset():
    _, frames = _flat_frames()
    out = add_occluders(frames, [])
    np.testing.assert_array_equal(out[0].image, frames[0].image)
    assert out[0].inpainted_image is None


def test_box_occluder_labels_and_oracle():
    _, frames = _flat_frames()
    box = {"box_min": [1.5, -0.5, 0.0], "box_max": [2.5, 0.5, 1.0], "color": [0.8, 0.1, 0.1], "frames": "all"}
    (fr,) = add_occluders(frames, [box])
    np.testing.assert_array_equal(fr.inpainted_image, frames[0].image)
    # nadir view of the box top: rays hit z=1 inside the footprint
    o, d = fr.camera.rays()
    t = (1.0 - o[..., 2]) / d[..., 2]
    p = o + t[..., None] * d
    inside = (np.abs(p[..., 0] - 2.0) <= 0.5) & (np.abs(p[..., 1]) <= 0.5)
    np.testing.assert_array_equal(fr.label_map == VEHICLE, inside)
    untouched = ~inside
    np.testing.assert_array_equal(fr.image[untouched], frames[0].image[untouched])


def test_occluder_frame_selection():
    _, frames = _flat_frames()
    box = {"box_min": [1.5, -0.5, 0.0], "box_max": [2.5, 0.5, 1.0], "color": [1, 0, 0], "frames": ["0009"]}
    (fr,) = add_occluders(frames, [box])
    assert fr.inpainted_image is None


def test_lighting_identity_and_gain():
    _, frames = _flat_frames()
    out, _ = add_lighting_variation(frames, {"gain": [1.0, 1.0], "gamma": [1.0, 1.0]}, 0)
    np.testing.assert_array_equal(out[0].image, frames[0].image)
    frames[0].image = np.ones_like(frames[0].image)
    out, applied = add_lighting_variation(frames, {"per_frame": {"0000": {"gain": 0.5, "gamma": 1.0}}}, 0)
    np.testing.assert_allclose(out[0].image, np.round(0.5 * 255) / 255)
    assert applied == {"0000": {"gain": 0.5, "gamma": 1.0}}


def test_lighting_applied_to_both_images():
    spec = {**SMALL, "occluders": [{"box_min": [1.0, -0.6, 0.0], "box_max": [2.0, 0.6, 1.2],
                                    "color": [0.2, 0.3, 0.8], "frames": "all"}],
            "lighting": {"gain": [0.7, 1.3]}}
    ds = build_dataset(spec)
    assert set(ds.lighting) == {f.id for f in ds.frames}
    plain = build_dataset({**spec, "lighting": None})
    for f, p in zip(ds.frames, plain.frames):
        g = ds.lighting[f.id]["gain"]
        np.testing.assert_allclose(f.image, np.round(np.clip(g * p.image, 0, 1) * 255) / 255, atol=1e-12)
        if p.inpainted_image is not None:
            np.testing.assert_allclose(f.inpainted_image,
                                       np.round(np.clip(g * p.inpainted_image, 0, 1) * 255) / 255, atol=1e-12)
