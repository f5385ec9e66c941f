"""Top-down orthographic map export and reconstruction metrics."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .io import read_gray, read_json, read_pfm, read_rgb, write_json, write_labels, write_pfm, write_rgb
from .rasterizer import RenderOptions, _surfel_corners, render_rays
from .scene import Scene
from .sh import surfel_colors

DEFAULT_RESOLUTION = 0.05
COVERAGE_THRESHOLD = 0.1
EMPTY_LABEL = 255
PSNR_INF = float("inf")

_PALETTE = {
    "road": (128, 64, 128), "lane_marking": (255, 255, 255), "sidewalk": (244, 35, 232),
    "curb": (196, 196, 196), "vehicle": (0, 0, 142), "pedestrian": (220, 20, 60),
    "rider": (255, 0, 0), "bicycle": (119, 11, 32), "sky": (70, 130, 180),
}


def palette_for(class_names: list[str]) -> list[tuple]:
    pal = []
    for name in class_names:
        if name in _PALETTE:
            pal.append(_PALETTE[name])
        else:
            h = zlib.crc32(name.encode())
            pal.append(((h >> 16) & 255, (h >> 8) & 255, h & 255))
    pal += [(0, 0, 0)] * (EMPTY_LABEL - len(pal))
    return pal + [(0, 0, 0)]


@dataclass
class BEVGrid:
    origin: tuple  # world (x, y) of cell (0, 0)'s center
    resolution: float  # meters per cell
    width: int  # cells along x
    height: int  # cells along y (row i <-> y = origin_y + i * resolution)

    def __post_init__(self) -> None:
        if not self.resolution > 0:
            raise ValueError("BEV resolution must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("BEV grid has no cells")

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        xs = self.origin[0] + self.resolution * np.arange(self.width)
        ys = self.origin[1] + self.resolution * np.arange(self.height)
        return np.meshgrid(xs, ys)

    @classmethod
    def covering(cls, x_range, y_range, resolution: float = DEFAULT_RESOLUTION) -> "BEVGrid":
        w = int(math.floor((x_range[1] - x_range[0]) / resolution + 1e-9)) + 1
        h = int(math.floor((y_range[1] - y_range[0]) / resolution + 1e-9)) + 1
        return cls((float(x_range[0]), float(y_range[0])), float(resolution), w, h)

    @classmethod
    def for_scene(cls, scene: Scene, resolution: float = DEFAULT_RESOLUTION) -> "BEVGrid":
        """Grid covering the surfel centers' bounding box."""
        if len(scene) == 0:
            return cls((0.0, 0.0), resolution, 1, 1)
        lo = scene.centers[:, :2].min(axis=0)
        hi = scene.centers[:, :2].max(axis=0)
        return cls.covering((lo[0], hi[0]), (lo[1], hi[1]), resolution)

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "resolution": self.resolution,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "BEVGrid":
        return cls(tuple(d["origin"]), float(d["resolution"]), int(d["width"]), int(d["height"]))


@dataclass
class BEVMap:
    grid: BEVGrid
    rgb: np.ndarray  # (H, W, 3)
    semantic: np.ndarray  # (H, W) argmax class, EMPTY_LABEL where uncovered
    elevation: np.ndarray  # (H, W) meters, NaN where uncovered
    coverage: np.ndarray  # (H, W) accumulated alpha
    coverage_threshold: float = COVERAGE_THRESHOLD

    @property
    def covered(self) -> np.ndarray:
        return self.coverage >= self.coverage_threshold


def export_bev(scene: Scene, grid: BEVGrid, background=(0.0, 0.0, 0.0),
               coverage_threshold: float = COVERAGE_THRESHOLD, tiled: bool = True) -> BEVMap:
    """Render the scene with one vertical ray per grid cell, looking straight down."""
    h, w = grid.height, grid.width
    x, y = grid.cell_centers()
    if len(scene):
        reach = 3.0 * scene.scales.max() + 1.0
        z_top = float(scene.centers[:, 2].max() + reach)
    else:
        z_top = 1.0
    ray_o = np.stack([x, y, np.full_like(x, z_top)], axis=-1)
    ray_d = np.broadcast_to(np.array([0.0, 0.0, -1.0]), ray_o.shape)
    opts = RenderOptions(background=background, tiled=tiled, retain_contributions=False)
    if len(scene):
        colors = surfel_colors(scene.sh, scene.centers, None, direction=np.array([0.0, 0.0, -1.0]))[0]
        corners = _surfel_corners(scene, opts.cutoff)
        cx = (corners[..., 0] - grid.origin[0]) / grid.resolution
        cy = (corners[..., 1] - grid.origin[1]) / grid.resolution
        bbox = np.stack([cx.min(1), cx.max(1), cy.min(1), cy.max(1)], axis=1)
    else:
        colors = np.zeros((0, 3))
        bbox = np.zeros((0, 4))
    raw = render_rays(scene, ray_o, ray_d, colors, bbox, h, w, opts)
    cov = raw["alpha"]
    covered = cov >= coverage_threshold
    rgb = np.where(covered[..., None], raw["color"], np.asarray(background, float))
    elevation = np.where(covered, z_top - raw["depth"], np.nan)
    semantic = np.where(covered, raw["semantic"].argmax(axis=-1), EMPTY_LABEL) if scene.class_count \
        else np.full((h, w), EMPTY_LABEL)
    return BEVMap(grid, rgb, semantic.astype(np.int64), elevation, cov, coverage_threshold)


def _check(a: np.ndarray, b: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    m = np.ones(a.shape[:2], bool) if mask is None else np.asarray(mask, bool)
    if m.shape != a.shape[:2]:
        raise ValueError("mask shape mismatch")
    if not m.any():
        raise ValueError("mask selects no pixels")
    return m


def psnr(a: np.ndarray, b: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """PSNR in dB for [0, 1] images over masked pixels; ``inf`` for identical inputs."""
    m = _check(a, b, mask)
    mse = float(np.mean((np.asarray(a, float)[m] - np.asarray(b, float)[m]) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / mse)


def elevation_rmse(pred: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    m = _check(pred, gt, mask)
    return float(np.sqrt(np.mean((np.asarray(pred, float)[m] - np.asarray(gt, float)[m]) ** 2)))


def per_class_accuracy(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray, class_names: list[str]) -> dict:
    out = {}
    for c, name in enumerate(class_names):
        sel = mask & (gt == c)
        if sel.any():
            out[name] = float(np.mean(pred[sel] == c))
    return out


def fit_slope(grid: BEVGrid, elevation: np.ndarray, mask: np.ndarray) -> tuple[float, float, float]:
    """Least-squares plane ``z = a + gx * x + gy * y`` over masked cells; returns (gx, gy, a)."""
    x, y = grid.cell_centers()
    A = np.stack([x[mask], y[mask], np.ones(int(mask.sum()))], axis=1)
    coef, *_ = np.linalg.lstsq(A, elevation[mask], rcond=None)
    return float(coef[0]), float(coef[1]), float(coef[2])


# ---------------------------------------------------------------- files

def save_bev(out_dir: Path, bev: BEVMap, class_names: list[str]) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_rgb(out_dir / "bev_rgb.png", bev.rgb)
    write_labels(out_dir / "bev_semantic.png", bev.semantic, palette_for(class_names))
    write_pfm(out_dir / "bev_elevation.pfm", bev.elevation)
    write_pfm(out_dir / "bev_coverage.pfm", bev.coverage)
    meta = bev.grid.to_dict()
    meta["coverage_threshold"] = bev.coverage_threshold
    meta["class_names"] = list(class_names)
    write_json(out_dir / "bev_meta.json", meta)


def load_bev(in_dir: Path) -> tuple[BEVMap, list[str]]:
    in_dir = Path(in_dir)
    meta = read_json(in_dir / "bev_meta.json")
    grid = BEVGrid.from_dict(meta)
    rgb = read_rgb(in_dir / "bev_rgb.png")
    sem = read_gray(in_dir / "bev_semantic.png")
    elev = read_pfm(in_dir / "bev_elevation.pfm")
    cov_path = in_dir / "bev_coverage.pfm"
    cov = read_pfm(cov_path) if cov_path.exists() else np.isfinite(elev).astype(float)
    thr = float(meta.get("coverage_threshold", COVERAGE_THRESHOLD))
    return BEVMap(grid, rgb, sem, elev, cov, thr), meta.get("class_names", [])


def compare_bev(pred: BEVMap, gt: BEVMap, class_names: list[str]) -> dict:
    """Metrics over cells covered in both maps."""
    if pred.rgb.shape != gt.rgb.shape:
        raise ValueError(f"BEV size mismatch: {pred.rgb.shape[:2]} vs {gt.rgb.shape[:2]}")
    mask = pred.covered & gt.covered & np.isfinite(pred.elevation) & np.isfinite(gt.elevation)
    if not mask.any():
        return {"psnr_db": None, "elevation_rmse_m": None, "per_class_pixel_accuracy": {}, "cells": 0}
    return {
        "psnr_db": psnr(pred.rgb, gt.rgb, mask),
        "elevation_rmse_m": elevation_rmse(pred.elevation, gt.elevation, mask),
        "per_class_pixel_accuracy": per_class_accuracy(pred.semantic, gt.semantic, mask, class_names),
        "cells": int(mask.sum()),
    }
