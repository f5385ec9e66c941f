"""Shared scene builders for the test suite."""

import numpy as np

from roadsurf.scene import Scene, Surfel, look_camera, rotate_vectors
from roadsurf.sh import rgb_to_dc


def make_surfel(center=(0.0, 0.0, 0.0), scales=(1.0, 1.0), rot=(0.0, 0.0, 0.0), opacity=0.5,
                color=None, classes=3, logits=None) -> Surfel:
    rv = np.asarray(rot, float)[None]
    tu = rotate_vectors(np.array([[1.0, 0.0, 0.0]]), rv)[0]
    tv = rotate_vectors(np.array([[0.0, 1.0, 0.0]]), rv)[0]
    sh = np.zeros((3, 16))
    if color is not None:
        sh[:, 0] = rgb_to_dc(color)
    sem = np.zeros(classes) if logits is None else np.asarray(logits, float)
    return Surfel(np.asarray(center, float), scales[0], scales[1], tu, tv, opacity, sh, sem)


def random_scene(rng: np.random.Generator, n: int, classes: int = 3, spread: float = 1.0) -> Scene:
    """Loosely overlapping surfels near z=0 with random tilt, seen from a camera above."""
    surfels = []
    for _ in range(n):
        surfels.append(make_surfel(
            center=(rng.uniform(-spread, spread), rng.uniform(-spread, spread), rng.uniform(-0.3, 0.3)),
            scales=tuple(rng.uniform(0.1, 0.6, 2)),
            rot=rng.normal(0, 0.3, 3),
            opacity=rng.uniform(0.1, 0.95),
            classes=classes,
            logits=rng.normal(0, 1, classes),
        ))
    scene = Scene.from_surfels(surfels, [f"c{i}" for i in range(classes)])
    scene.sh = rng.normal(0, 0.3, scene.sh.shape)
    return scene


def nadir_camera(height=3.0, size=24, fx=20.0):
    return look_camera([0.0, 0.0, height], 0.0, np.pi / 2, width=size, height=size, fx=fx)
