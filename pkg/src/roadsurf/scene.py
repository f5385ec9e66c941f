"""Surfel field, pinhole camera and dataset value types.

Scenes are stored structure-of-arrays so the rasterizer kernels can consume
them without copying; :class:`Surfel` is the per-primitive view used by the
scalar geometry helpers and tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

SH_COEFFS = 16
FRAME_TOL = 1e-6


@dataclass
class Surfel:
    center: np.ndarray
    scale_u: float
    scale_v: float
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    opacity: float
    sh_coeffs: np.ndarray  # (3, 16)
    semantic_logits: np.ndarray  # (C,)

    def validate(self) -> None:
        tu = np.asarray(self.tangent_u, float)
        tv = np.asarray(self.tangent_v, float)
        if abs(tu @ tv) > FRAME_TOL:
            raise ValueError("tangent_u and tangent_v are not orthogonal")
        if abs(np.linalg.norm(tu) - 1) > FRAME_TOL or abs(np.linalg.norm(tv) - 1) > FRAME_TOL:
            raise ValueError("tangent vectors must be unit length")
        if not (self.scale_u > 0 and self.scale_v > 0):
            raise ValueError("scales must be positive")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError("opacity must lie in [0, 1]")


def surfel_local_to_world(surfel: Surfel, u: float, v: float) -> np.ndarray:
    """Map tangent-plane coordinates ``(u, v)`` to a world point."""
    return (
        np.asarray(surfel.center, float)
        + surfel.scale_u * np.asarray(surfel.tangent_u, float) * u
        + surfel.scale_v * np.asarray(surfel.tangent_v, float) * v
    )


def surfel_normal(surfel: Surfel) -> np.ndarray:
    """Unit normal of the surfel plane, oriented so that its z component is >= 0."""
    return upward_normals(
        np.asarray(surfel.tangent_u, float)[None], np.asarray(surfel.tangent_v, float)[None]
    )[0]


def upward_normals(tu: np.ndarray, tv: np.ndarray) -> np.ndarray:
    n = np.cross(tu, tv)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    flip = n[..., 2] < 0
    n[flip] *= -1.0
    return n


def orthonormalize(tu: np.ndarray, tv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gram-Schmidt on (N, 3) tangent pairs; ``tu`` keeps its direction."""
    tu = tu / np.linalg.norm(tu, axis=-1, keepdims=True)
    tv = tv - np.sum(tv * tu, axis=-1, keepdims=True) * tu
    tv = tv / np.linalg.norm(tv, axis=-1, keepdims=True)
    return tu, tv


def rotate_vectors(vecs: np.ndarray, rotvec: np.ndarray) -> np.ndarray:
    """Rodrigues rotation of (N, 3) vectors by per-row axis-angle vectors."""
    theta = np.linalg.norm(rotvec, axis=-1, keepdims=True)
    safe = np.where(theta > 0, theta, 1.0)
    k = rotvec / safe
    cos, sin = np.cos(theta), np.sin(theta)
    out = vecs * cos + np.cross(k, vecs) * sin + k * np.sum(k * vecs, axis=-1, keepdims=True) * (1 - cos)
    return np.where(theta > 0, out, vecs)


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))  # world-from-camera
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))  # camera center in world

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def validate(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        r = self.rotation
        if np.abs(r.T @ r - np.eye(3)).max() > FRAME_TOL or abs(np.linalg.det(r) - 1) > FRAME_TOL:
            raise ValueError("camera rotation is not a proper rotation")

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def pixel_ray(self, x: float, y: float) -> np.ndarray:
        """World direction through pixel ``(x, y)``, scaled to unit camera depth.

        Pixel centers sit at integer coordinates.
        """
        d_cam = np.array([(x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0])
        return self.rotation @ d_cam

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-pixel ray origins and directions, each (H, W, 3).

        Directions have unit camera-frame z so ray parameter equals camera depth.
        """
        xs = (np.arange(self.width) - self.cx) / self.fx
        ys = (np.arange(self.height) - self.cy) / self.fy
        d_cam = np.stack(
            [np.broadcast_to(xs[None, :], (self.height, self.width)),
             np.broadcast_to(ys[:, None], (self.height, self.width)),
             np.ones((self.height, self.width))],
            axis=-1,
        )
        dirs = d_cam @ self.rotation.T
        origins = np.broadcast_to(self.translation, dirs.shape).copy()
        return origins, np.ascontiguousarray(dirs)

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points (N, 3) to pixel coordinates (N, 2) and camera depths (N,)."""
        cam = (points - self.translation) @ self.rotation
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            px = np.stack([self.fx * cam[:, 0] / z + self.cx,
                           self.fy * cam[:, 1] / z + self.cy], axis=-1)
        return px, z

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": self.rotation.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]),
                   np.asarray(d["rotation"], float).reshape(3, 3),
                   np.asarray(d["translation"], float))


def look_camera(position, yaw: float, pitch: float, *, width: int, height: int,
                fx: float, fy: Optional[float] = None) -> Camera:
    """Camera at ``position`` heading ``yaw`` (radians, from +x) and pitched ``pitch`` below the horizon."""
    fy = fx if fy is None else fy
    cp, sp = np.cos(pitch), np.sin(pitch)
    cyaw, syaw = np.cos(yaw), np.sin(yaw)
    forward = np.array([cp * cyaw, cp * syaw, -sp])
    right = np.array([syaw, -cyaw, 0.0])
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward], axis=1)
    return Camera(fx, fy, (width - 1) / 2.0, (height - 1) / 2.0, width, height, rot, np.asarray(position, float))


@dataclass
class Frame:
    id: str
    image: np.ndarray  # (H, W, 3) in [0, 1]
    camera: Camera
    label_map: np.ndarray  # (H, W) int
    occluder_mask: Optional[np.ndarray] = None
    inpainted_image: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None  # ground truth, synthetic data only

    def validate(self, class_count: Optional[int] = None) -> None:
        shape = (self.camera.height, self.camera.width)
        if self.image.shape != shape + (3,):
            raise ValueError(f"frame {self.id}: image shape {self.image.shape} != {shape + (3,)}")
        if self.label_map.shape != shape:
            raise ValueError(f"frame {self.id}: label map shape {self.label_map.shape} != {shape}")
        if self.occluder_mask is not None and self.occluder_mask.shape != shape:
            raise ValueError(f"frame {self.id}: occluder mask shape mismatch")
        if self.inpainted_image is not None and self.inpainted_image.shape != shape + (3,):
            raise ValueError(f"frame {self.id}: inpainted image shape mismatch")
        if class_count is not None and self.label_map.size:
            if self.label_map.min() < 0 or self.label_map.max() >= class_count:
                raise ValueError(f"frame {self.id}: label outside [0, {class_count})")


@dataclass
class Scene:
    """Ordered surfel field in structure-of-arrays form."""

    centers: np.ndarray  # (N, 3)
    scales: np.ndarray  # (N, 2)
    tangent_u: np.ndarray  # (N, 3)
    tangent_v: np.ndarray  # (N, 3)
    opacity: np.ndarray  # (N,)
    sh: np.ndarray  # (N, 3, 16)
    semantic: np.ndarray  # (N, C)
    class_names: list[str]

    def __post_init__(self) -> None:
        n = len(self.centers)
        self.centers = np.asarray(self.centers, np.float64).reshape(n, 3)
        self.scales = np.asarray(self.scales, np.float64).reshape(n, 2)
        self.tangent_u = np.asarray(self.tangent_u, np.float64).reshape(n, 3)
        self.tangent_v = np.asarray(self.tangent_v, np.float64).reshape(n, 3)
        self.opacity = np.asarray(self.opacity, np.float64).reshape(n)
        self.sh = np.asarray(self.sh, np.float64).reshape(n, 3, SH_COEFFS)
        self.semantic = np.asarray(self.semantic, np.float64).reshape(n, len(self.class_names))

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.centers)

    @classmethod
    def empty(cls, class_names: Sequence[str]) -> "Scene":
        c = len(class_names)
        return cls(np.zeros((0, 3)), np.zeros((0, 2)), np.zeros((0, 3)), np.zeros((0, 3)),
                   np.zeros(0), np.zeros((0, 3, SH_COEFFS)), np.zeros((0, c)), list(class_names))

    @classmethod
    def from_surfels(cls, surfels: Sequence[Surfel], class_names: Sequence[str]) -> "Scene":
        if not surfels:
            return cls.empty(class_names)
        c = len(class_names)
        for s in surfels:
            if len(s.semantic_logits) != c:
                raise ValueError("all surfels must carry one logit per class")
        return cls(
            np.array([s.center for s in surfels], float),
            np.array([[s.scale_u, s.scale_v] for s in surfels], float),
            np.array([s.tangent_u for s in surfels], float),
            np.array([s.tangent_v for s in surfels], float),
            np.array([s.opacity for s in surfels], float),
            np.array([s.sh_coeffs for s in surfels], float),
            np.array([s.semantic_logits for s in surfels], float),
            list(class_names),
        )

    def surfel(self, i: int) -> Surfel:
        return Surfel(self.centers[i].copy(), float(self.scales[i, 0]), float(self.scales[i, 1]),
                      self.tangent_u[i].copy(), self.tangent_v[i].copy(), float(self.opacity[i]),
                      self.sh[i].copy(), self.semantic[i].copy())

    def copy(self) -> "Scene":
        return replace(
            self, centers=self.centers.copy(), scales=self.scales.copy(),
            tangent_u=self.tangent_u.copy(), tangent_v=self.tangent_v.copy(),
            opacity=self.opacity.copy(), sh=self.sh.copy(), semantic=self.semantic.copy(),
            class_names=list(self.class_names),
        )

    def subset(self, idx: np.ndarray) -> "Scene":
        return Scene(self.centers[idx], self.scales[idx], self.tangent_u[idx], self.tangent_v[idx],
                     self.opacity[idx], self.sh[idx], self.semantic[idx], list(self.class_names))

    def plane_normals(self) -> np.ndarray:
        """Raw ``t_u x t_v`` per surfel (unit for valid frames, not sign-canonicalized)."""
        return np.cross(self.tangent_u, self.tangent_v)

    def normals(self) -> np.ndarray:
        if len(self) == 0:
            return np.zeros((0, 3))
        return upward_normals(self.tangent_u, self.tangent_v)

    def validate(self) -> None:
        if len(self) == 0:
            return
        dots = np.abs(np.sum(self.tangent_u * self.tangent_v, axis=1))
        if dots.max() > FRAME_TOL:
            raise ValueError(f"surfel {int(dots.argmax())}: tangent frame not orthogonal")
        for name, t in (("tangent_u", self.tangent_u), ("tangent_v", self.tangent_v)):
            err = np.abs(np.linalg.norm(t, axis=1) - 1)
            if err.max() > FRAME_TOL:
                raise ValueError(f"surfel {int(err.argmax())}: {name} not unit length")
        if (self.scales <= 0).any():
            raise ValueError("surfel scales must be positive")
        if (self.opacity < 0).any() or (self.opacity > 1).any():
            raise ValueError("surfel opacity outside [0, 1]")
