"""Forward rendering of surfel fields by exact per-pixel ray/plane intersection.

The scalar helpers (:func:`ray_splat_intersect`, :func:`sort_hits`,
:func:`blend_ray`) define the per-ray semantics; :func:`render` runs the same
math for whole images through the numba kernels in :mod:`roadsurf._kernels`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import _kernels
from .scene import Camera, Scene, Surfel, surfel_normal
from .sh import surfel_colors

DEFAULT_CUTOFF = 3.0
ALPHA_EPS = 1e-4
TILE = 16


def gaussian_weight(u: float, v: float) -> float:
    return math.exp(-(u * u + v * v) / 2.0)


@dataclass(frozen=True)
class SplatHit:
    surfel_index: int
    u: float
    v: float
    depth: float
    weight: float
    normal: tuple = (0.0, 0.0, 1.0)


@dataclass
class PerRayContribution:
    hits: list[SplatHit]
    omegas: np.ndarray


@dataclass
class RayBlend:
    color: np.ndarray
    depth: float
    normal: np.ndarray
    semantic: np.ndarray
    alpha: float
    contribution: PerRayContribution


def _intersect_ray(origin, direction, surfel: Surfel, cutoff: float):
    n = np.cross(surfel.tangent_u, surfel.tangent_v)
    dn = float(direction @ n)
    if abs(dn) < _kernels.GRAZING_EPS * np.linalg.norm(direction):
        return None
    t = float((np.asarray(surfel.center) - origin) @ n) / dn
    if not t > _kernels.NEAR_DEPTH:
        return None
    r = origin + t * direction - surfel.center
    u = float(r @ surfel.tangent_u) / surfel.scale_u
    v = float(r @ surfel.tangent_v) / surfel.scale_v
    if u * u + v * v > cutoff * cutoff:
        return None
    return t, u, v


def ray_splat_intersect(camera: Camera, pixel, surfel: Surfel, surfel_index: int = 0,
                        cutoff: float = DEFAULT_CUTOFF) -> Optional[SplatHit]:
    """Intersect the viewing ray of ``pixel`` with the surfel plane.

    Returns None for grazing rays, hits behind the camera and hits beyond the
    Gaussian cutoff radius.
    """
    x, y = pixel
    hit = _intersect_ray(camera.center, camera.pixel_ray(x, y), surfel, cutoff)
    if hit is None:
        return None
    t, u, v = hit
    return SplatHit(surfel_index, u, v, t, gaussian_weight(u, v), tuple(surfel_normal(surfel)))


def sort_hits(hits: Sequence[SplatHit]) -> list[SplatHit]:
    return sorted(hits, key=lambda h: (h.depth, h.surfel_index))


def blend_ray(hits: Sequence[SplatHit], opacities, colors, semantics=None) -> RayBlend:
    """Front-to-back composite of depth-sorted hits.

    Args:
        hits: Hits sorted by ascending depth.
        opacities: Per-surfel opacity, indexed by ``surfel_index``.
        colors: Per-surfel RGB, indexed by ``surfel_index``.
        semantics: Optional per-surfel logits, indexed by ``surfel_index``.
    """
    trans = 1.0
    color = np.zeros(3)
    nsum = np.zeros(3)
    n_cls = 0 if semantics is None else len(np.asarray(semantics[hits[0].surfel_index])) if hits else 0
    sem = np.zeros(n_cls)
    omegas = np.empty(len(hits))
    zsum = 0.0
    for i, h in enumerate(hits):
        a = float(opacities[h.surfel_index]) * h.weight
        w = a * trans
        trans *= 1.0 - a
        omegas[i] = w
        color += w * np.asarray(colors[h.surfel_index], float)
        if n_cls:
            sem += w * np.asarray(semantics[h.surfel_index], float)
        zsum += w * h.depth
        nsum += w * np.asarray(h.normal, float)
    alpha = float(omegas.sum()) if len(hits) else 0.0
    depth = zsum / alpha if alpha > 0 else 0.0
    normal = nsum / alpha if alpha > 0 else np.zeros(3)
    if alpha > 0 and np.linalg.norm(normal) > 0:
        normal = normal / np.linalg.norm(normal)
    return RayBlend(color, depth, normal, sem, alpha, PerRayContribution(list(hits), omegas))


@dataclass
class RenderOptions:
    background: tuple = (0.5, 0.5, 0.5)
    cutoff: float = DEFAULT_CUTOFF
    tiled: bool = True
    tile_size: int = TILE
    retain_contributions: bool = True


@dataclass
class Contributions:
    """Per-pixel hit lists in compressed-row form (pixel-major, depth-sorted)."""

    height: int
    width: int
    offsets: np.ndarray  # (H*W + 1,)
    surfel: np.ndarray
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    weight: np.ndarray  # Gaussian value G
    omega: np.ndarray  # blend weight

    def ray(self, y: int, x: int, normals: Optional[np.ndarray] = None) -> PerRayContribution:
        p = y * self.width + x
        sl = slice(self.offsets[p], self.offsets[p + 1])
        hits = [
            SplatHit(int(s), float(u), float(v), float(z), float(g),
                     tuple(normals[s]) if normals is not None else (0.0, 0.0, 1.0))
            for s, u, v, z, g in zip(self.surfel[sl], self.u[sl], self.v[sl], self.depth[sl], self.weight[sl])
        ]
        return PerRayContribution(hits, self.omega[sl].copy())

    @property
    def hit_count(self) -> int:
        return int(self.offsets[-1])


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    normal: np.ndarray  # (H, W, 3)
    semantic: np.ndarray  # (H, W, C)
    alpha: np.ndarray  # (H, W)
    dominant_normal: np.ndarray  # (H, W, 3)
    normal_valid: np.ndarray  # (H, W) bool
    contributions: Optional[Contributions] = None
    normal_sum: Optional[np.ndarray] = None  # (H, W, 3) sum of omega * n
    background_mask: Optional[np.ndarray] = None
    # state the backward pass reuses
    cache: dict = field(default_factory=dict, repr=False)


def _surfel_corners(scene: Scene, cutoff: float) -> np.ndarray:
    a = cutoff * scene.scales[:, :1] * scene.tangent_u
    b = cutoff * scene.scales[:, 1:] * scene.tangent_v
    c = scene.centers
    return np.stack([c + a + b, c + a - b, c - a + b, c - a - b], axis=1)  # (N, 4, 3)


def _bin_tiles(bbox: np.ndarray, height: int, width: int, tile: int):
    """Assign surfels to screen tiles from inclusive pixel bounding boxes (x0, x1, y0, y1)."""
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    ntiles = tiles_x * tiles_y
    ys, xs = np.divmod(np.arange(height * width), width)
    pix_tile = (ys // tile) * tiles_x + xs // tile
    if len(bbox) == 0:
        return pix_tile, np.zeros(ntiles + 1, np.int64), np.zeros(0, np.int64)
    x0 = np.clip(np.floor(bbox[:, 0]), 0, width - 1).astype(np.int64)
    x1 = np.clip(np.ceil(bbox[:, 1]), 0, width - 1).astype(np.int64)
    y0 = np.clip(np.floor(bbox[:, 2]), 0, height - 1).astype(np.int64)
    y1 = np.clip(np.ceil(bbox[:, 3]), 0, height - 1).astype(np.int64)
    visible = (bbox[:, 1] >= -1) & (bbox[:, 0] <= width) & (bbox[:, 3] >= -1) & (bbox[:, 2] <= height)
    sid = np.nonzero(visible)[0]
    tx0, tx1 = x0[sid] // tile, x1[sid] // tile
    ty0, ty1 = y0[sid] // tile, y1[sid] // tile
    nx, ny = tx1 - tx0 + 1, ty1 - ty0 + 1
    counts = nx * ny
    rep = np.repeat(np.arange(len(sid)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tiles = (ty0[rep] + local // nx[rep]) * tiles_x + tx0[rep] + local % nx[rep]
    surf = sid[rep]
    order = np.lexsort((surf, tiles))
    tiles, surf = tiles[order], surf[order]
    tile_off = np.zeros(ntiles + 1, np.int64)
    tile_off[1:] = np.cumsum(np.bincount(tiles, minlength=ntiles))
    return pix_tile, tile_off, surf.astype(np.int64)


def perspective_bboxes(scene: Scene, camera: Camera, cutoff: float) -> np.ndarray:
    """Pixel bounding boxes of each surfel's cutoff square clipped to the near plane.

    Surfels entirely behind the near plane get an off-screen box.
    """
    n = len(scene)
    if n == 0:
        return np.zeros((0, 4))
    near = _kernels.NEAR_DEPTH
    corners = _surfel_corners(scene, cutoff)[:, [0, 1, 3, 2]]  # cyclic order
    cam = (corners - camera.translation) @ camera.rotation
    z = cam[..., 2]
    nxt = np.roll(cam, -1, axis=1)
    zn = nxt[..., 2]
    crossing = ((z < near) != (zn < near))[..., None]
    with np.errstate(divide="ignore", invalid="ignore"):
        f = (near - z) / (zn - z)
        edge_pts = np.where(crossing, cam + f[..., None] * (nxt - cam), np.nan)
    pts = np.concatenate([np.where((z >= near)[..., None], cam, np.nan), edge_pts], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        px = camera.fx * pts[..., 0] / np.maximum(pts[..., 2], near) + camera.cx
        py = camera.fy * pts[..., 1] / np.maximum(pts[..., 2], near) + camera.cy
    lo_x, hi_x = np.where(np.isnan(px), np.inf, px), np.where(np.isnan(px), -np.inf, px)
    lo_y, hi_y = np.where(np.isnan(py), np.inf, py), np.where(np.isnan(py), -np.inf, py)
    bbox = np.stack([lo_x.min(1), hi_x.max(1), lo_y.min(1), hi_y.max(1)], axis=1)
    hidden = ~(z >= near).any(axis=1)
    bbox[hidden] = [-10.0, -10.0, -10.0, -10.0]
    return bbox


def _candidates(bbox, height, width, opts: RenderOptions, n_surfels: int):
    if opts.tiled:
        return _bin_tiles(bbox, height, width, opts.tile_size)
    pix_tile = np.zeros(height * width, np.int64)
    return pix_tile, np.array([0, n_surfels], np.int64), np.arange(n_surfels, dtype=np.int64)


def render_rays(scene: Scene, ray_o: np.ndarray, ray_d: np.ndarray, colors: np.ndarray,
                bbox: np.ndarray, height: int, width: int, opts: RenderOptions) -> dict:
    """Composite every ray in (H, W, 3) origin/direction arrays; returns raw buffers."""
    n = len(scene)
    npix = height * width
    c = scene.class_count
    o = np.ascontiguousarray(ray_o.reshape(npix, 3), np.float64)
    d = np.ascontiguousarray(ray_d.reshape(npix, 3), np.float64)
    pix_tile, tile_off, tile_list = _candidates(bbox, height, width, opts, n)
    pn = np.ascontiguousarray(scene.plane_normals()) if n else np.zeros((0, 3))
    normals = np.ascontiguousarray(scene.normals())
    args = (np.ascontiguousarray(scene.centers), np.ascontiguousarray(scene.tangent_u),
            np.ascontiguousarray(scene.tangent_v), pn, np.ascontiguousarray(scene.scales))
    cutoff2 = float(opts.cutoff) ** 2
    counts = _kernels.count_hits(o, d, *args, cutoff2, pix_tile, tile_off, tile_list)
    offsets = np.zeros(npix + 1, np.int64)
    np.cumsum(counts, out=offsets[1:])
    nh = int(offsets[-1])
    hit_surf = np.zeros(nh, np.int64)
    hit_u, hit_v, hit_z, hit_g, hit_w = (np.zeros(nh) for _ in range(5))
    out_color = np.zeros((npix, 3))
    out_sem = np.zeros((npix, c))
    out_depth = np.zeros(npix)
    out_nacc = np.zeros((npix, 3))
    out_alpha = np.zeros(npix)
    _kernels.render_rays(o, d, *args, np.ascontiguousarray(scene.opacity),
                         np.ascontiguousarray(colors, np.float64), np.ascontiguousarray(scene.semantic),
                         normals, cutoff2, pix_tile, tile_off, tile_list, offsets,
                         hit_surf, hit_u, hit_v, hit_z, hit_g, hit_w,
                         out_color, out_sem, out_depth, out_nacc, out_alpha)
    contrib = Contributions(height, width, offsets, hit_surf, hit_u, hit_v, hit_z, hit_g, hit_w)
    return {
        "color": out_color.reshape(height, width, 3),
        "semantic": out_sem.reshape(height, width, c),
        "depth": out_depth.reshape(height, width),
        "normal_sum": out_nacc.reshape(height, width, 3),
        "alpha": out_alpha.reshape(height, width),
        "contributions": contrib,
        "normals": normals,
        "plane_normals": pn,
        "ray_o": o,
        "ray_d": d,
    }


def dominant_normals(ray_o: np.ndarray, ray_d: np.ndarray, depth: np.ndarray, alpha: np.ndarray):
    """Per-pixel plane normal from central differences of the back-projected depth buffer.

    Returns (normals (H, W, 3), valid (H, W), cache for the backward pass).
    Border pixels and pixels with an uncovered neighbor are invalid.
    """
    h, w = depth.shape
    pts = ray_o.reshape(h, w, 3) + depth[..., None] * ray_d.reshape(h, w, 3)
    covered = alpha >= ALPHA_EPS
    px = np.zeros((h, w, 3))
    py = np.zeros((h, w, 3))
    px[:, 1:-1] = 0.5 * (pts[:, 2:] - pts[:, :-2])
    py[1:-1, :] = 0.5 * (pts[2:, :] - pts[:-2, :])
    valid = np.zeros((h, w), bool)
    valid[1:-1, 1:-1] = (covered[1:-1, 1:-1] & covered[1:-1, 2:] & covered[1:-1, :-2]
                         & covered[2:, 1:-1] & covered[:-2, 1:-1])
    cr = np.cross(px, py)
    norm = np.linalg.norm(cr, axis=-1)
    valid &= norm > 1e-12
    unit = np.where(valid[..., None], cr / np.where(norm > 0, norm, 1.0)[..., None], 0.0)
    sign = np.where(unit[..., 2] < 0, -1.0, 1.0)
    normals = unit * sign[..., None]
    return normals, valid, {"px": px, "py": py, "unit": unit, "norm": norm, "sign": sign}


def render(scene: Scene, camera: Camera, opts: Optional[RenderOptions] = None) -> RenderOutput:
    """Render color, depth, normal, semantic and alpha buffers for one camera."""
    opts = opts or RenderOptions()
    camera.validate()
    h, w = camera.height, camera.width
    ray_o, ray_d = camera.rays()
    if len(scene):
        colors, inside, basis, dirs, dist = surfel_colors(scene.sh, scene.centers, camera.center)
    else:
        colors = np.zeros((0, 3))
        inside = basis = dirs = dist = None
    bbox = perspective_bboxes(scene, camera, opts.cutoff)
    raw = render_rays(scene, ray_o, ray_d, colors, bbox, h, w, opts)
    return _finish(raw, opts, {"inside": inside, "basis": basis, "dirs": dirs, "dist": dist,
                               "colors": colors, "origin": camera.center})


def _finish(raw: dict, opts: RenderOptions, color_cache: dict) -> RenderOutput:
    alpha = raw["alpha"]
    bg_mask = alpha < ALPHA_EPS
    color = raw["color"].copy()
    color[bg_mask] = np.asarray(opts.background, float)
    nsum = raw["normal_sum"]
    nlen = np.linalg.norm(nsum, axis=-1, keepdims=True)
    normal = np.where(nlen > 0, nsum / np.where(nlen > 0, nlen, 1.0), 0.0)
    dom, valid, dcache = dominant_normals(raw["ray_o"], raw["ray_d"], raw["depth"], alpha)
    cache = dict(color_cache)
    cache.update(dcache)
    cache.update({k: raw[k] for k in ("normals", "plane_normals", "ray_o", "ray_d")})
    return RenderOutput(
        color=color, depth=raw["depth"], normal=normal, semantic=raw["semantic"], alpha=alpha,
        dominant_normal=dom, normal_valid=valid,
        contributions=raw["contributions"] if opts.retain_contributions else None,
        normal_sum=nsum, background_mask=bg_mask, cache=cache,
    )
