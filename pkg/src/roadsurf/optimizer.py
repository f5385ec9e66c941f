"""Surfel initialization along the trajectory and the training loop."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .gradients import ParamGrads, Supervision, backward
from .losses import LossWeights
from .occlusion import OcclusionConfig, build_supervision
from .rasterizer import RenderOptions, render
from .rng import substream
from .scene import SH_COEFFS, Frame, Scene, orthonormalize, rotate_vectors

logger = logging.getLogger(__name__)

MIN_SCALE = 1e-4


@dataclass
class OptimConfig:
    iterations: int = 3000
    lr_center_xy: float = 2e-4
    lr_center_z: float = 1e-3
    lr_scales: float = 1e-3
    lr_rotation: float = 5e-3
    lr_opacity: float = 0.02
    lr_sh: float = 0.02
    sh_rest_lr_scale: float = 0.05  # rate multiplier for degree >= 1 coefficients
    lr_semantic: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-10
    prune_opacity_threshold: float = 0.005
    prune_interval: int = 500
    grid_spacing: float = 0.05
    grid_halfwidth: float = 2.0
    grid_margin: float = 0.0
    mount_height: float = 1.5
    seed: int = 0

    def __post_init__(self) -> None:
        for k, v in asdict(self).items():
            if k.startswith("lr_") and v < 0:
                raise ValueError(f"{k} must be nonnegative")
        if not self.grid_spacing > 0:
            raise ValueError("grid_spacing must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- init

def _band_points(ground_xy: np.ndarray, spacing: float, halfwidth: float, margin: float):
    """Lattice points within ``halfwidth`` of the polyline, extended ``margin`` past both ends.

    Returns (points (M, 2), along-track parameter (M,)).
    """
    origin = ground_xy[0]
    reach = halfwidth + margin
    lo = ground_xy.min(axis=0) - reach
    hi = ground_xy.max(axis=0) + reach
    i0 = np.floor((lo - origin) / spacing).astype(int)
    i1 = np.ceil((hi - origin) / spacing).astype(int)
    gx = origin[0] + spacing * np.arange(i0[0], i1[0] + 1)
    gy = origin[1] + spacing * np.arange(i0[1], i1[1] + 1)
    yy, xx = np.meshgrid(gy, gx, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    tol = 1e-9 * max(1.0, spacing)
    if len(ground_xy) == 1:
        keep = np.all(np.abs(pts - origin) <= halfwidth + tol, axis=1)
        return pts[keep], np.zeros(int(keep.sum()))
    seg_a = ground_xy[:-1]
    seg_b = ground_xy[1:]
    seg = seg_b - seg_a
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    best_d = np.full(len(pts), np.inf)
    best_s = np.zeros(len(pts))
    nseg = len(seg)
    for k in range(nseg):
        if seg_len[k] == 0:
            continue
        dirk = seg[k] / seg_len[k]
        rel = pts - seg_a[k]
        along = rel @ dirk
        lo_lim = -margin if k == 0 else 0.0
        hi_lim = seg_len[k] + (margin if k == nseg - 1 else 0.0)
        t = np.clip(along, lo_lim, hi_lim)
        lateral = np.abs(rel[:, 0] * dirk[1] - rel[:, 1] * dirk[0])
        off = np.abs(along - t)
        d = np.where(off <= tol, lateral, np.inf)
        better = d < best_d
        best_d[better] = d[better]
        best_s[better] = cum[k] + t[better]
    keep = best_d <= halfwidth + tol
    return pts[keep], best_s[keep]


def _ground_profile(s: np.ndarray, cum: np.ndarray, heights: np.ndarray, window: float) -> np.ndarray:
    """Piecewise-linear height along the track, continued linearly past both ends.

    The end slopes are least-squares fits over poses within ``window`` of each end
    (at least two), so margin cells on a grade start on the grade, not level.
    """
    z = np.interp(s, cum, heights)
    if cum[-1] <= 0:
        return z
    for end, outside in ((0, s < 0), (-1, s > cum[-1])):
        if not outside.any():
            continue
        near = np.abs(cum - cum[end]) <= window
        if near.sum() < 2:
            near = np.zeros(len(cum), bool)
            near[[0, 1] if end == 0 else [-2, -1]] = True
        ds = cum[near] - cum[near].mean()
        denom = float(ds @ ds)
        slope = float(ds @ (heights[near] - heights[near].mean())) / denom if denom > 0 else 0.0
        z[outside] = heights[end] + slope * (s[outside] - cum[end])
    return z


def init_scene(trajectory: Sequence[np.ndarray], config: OptimConfig, class_names: Sequence[str]) -> Scene:
    """Regular grid of horizontal surfels around the ground-projected trajectory.

    Args:
        trajectory: Camera centers (world, meters) in driving order.
        config: Grid spacing/half-width/margin and mount height.
        class_names: Semantic classes; logits start uniform.
    """
    if len(trajectory) == 0:
        raise ValueError("init_scene needs at least one pose")
    pos = np.asarray(trajectory, float).reshape(-1, 3)
    ground = pos[:, :2]
    heights = pos[:, 2] - config.mount_height
    pts, s = _band_points(ground, config.grid_spacing, config.grid_halfwidth, config.grid_margin)
    if len(pos) > 1:
        cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(ground, axis=0), axis=1))])
        z = _ground_profile(s, cum, heights, max(config.grid_margin, 2 * config.grid_spacing))
    else:
        z = np.full(len(pts), heights[0])
    n = len(pts)
    c = len(class_names)
    return Scene(
        np.column_stack([pts, z]),
        np.full((n, 2), config.grid_spacing),
        np.tile([1.0, 0.0, 0.0], (n, 1)),
        np.tile([0.0, 1.0, 0.0], (n, 1)),
        np.full(n, 0.5),
        np.zeros((n, 3, SH_COEFFS)),
        np.zeros((n, c)),
        list(class_names),
    )


# ---------------------------------------------------------------- adam

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def subset(self, keep: np.ndarray) -> "AdamState":
        return AdamState(self.step, {k: a[keep] for k, a in self.m.items()},
                         {k: a[keep] for k, a in self.v.items()})

    def to_arrays(self) -> dict:
        out = {"step": np.array(self.step)}
        for k, a in self.m.items():
            out[f"m_{k}"] = a
        for k, a in self.v.items():
            out[f"v_{k}"] = a
        return out

    @classmethod
    def from_arrays(cls, arrs: Mapping[str, np.ndarray]) -> "AdamState":
        st = cls(int(arrs["step"]))
        for k, a in arrs.items():
            if k.startswith("m_"):
                st.m[k[2:]] = np.array(a)
            elif k.startswith("v_"):
                st.v[k[2:]] = np.array(a)
        return st


def _rates(config: OptimConfig) -> dict:
    return {
        "center": np.array([config.lr_center_xy, config.lr_center_xy, config.lr_center_z]),
        "scales": config.lr_scales,
        "rotation": config.lr_rotation,
        "opacity": config.lr_opacity,
        "sh": config.lr_sh * np.concatenate([[1.0], np.full(SH_COEFFS - 1, config.sh_rest_lr_scale)]),
        "semantic": config.lr_semantic,
    }


def step(scene: Scene, grads: ParamGrads, state: AdamState, config: OptimConfig) -> tuple[Scene, AdamState]:
    """One bias-corrected Adam update, then restore frame/opacity/scale invariants."""
    grads.check_finite()
    st = AdamState(state.step + 1, dict(state.m), dict(state.v))
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** st.step
    c2 = 1.0 - b2 ** st.step
    rates = _rates(config)
    updates = {}
    for name, g in grads.items():
        m = st.m.get(name)
        v = st.v.get(name)
        if m is None or m.shape != g.shape:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        st.m[name] = m
        st.v[name] = v
        updates[name] = -rates[name] * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    out = scene.copy()
    out.centers += updates["center"]
    out.scales = np.clip(out.scales + updates["scales"], MIN_SCALE, 10.0 * config.grid_spacing)
    out.opacity = np.clip(out.opacity + updates["opacity"], 0.0, 1.0)
    out.sh += updates["sh"]
    out.semantic += updates["semantic"]
    rot = updates["rotation"]
    if np.any(rot):
        tu = rotate_vectors(out.tangent_u, rot)
        tv = rotate_vectors(out.tangent_v, rot)
        out.tangent_u, out.tangent_v = orthonormalize(tu, tv)
    return out, st


def prune(scene: Scene, threshold: float) -> Scene:
    return scene.subset(np.nonzero(scene.opacity >= threshold)[0])


# ---------------------------------------------------------------- loop

def frame_schedule(n_frames: int, seed: int, iteration: int) -> int:
    """Index of the frame visited at ``iteration``: shuffled round-robin, one permutation per epoch."""
    epoch, pos = divmod(iteration, n_frames)
    return int(substream(seed, "frame_order", epoch).permutation(n_frames)[pos])


@dataclass
class TrainResult:
    scene: Scene
    log: list
    state: AdamState
    iteration: int


def optimize(scene: Scene, dataset: Sequence[Frame], config: OptimConfig, loss_weights: LossWeights,
             occlusion: Optional[OcclusionConfig] = None, enhanced: Optional[Mapping[str, np.ndarray]] = None,
             state: Optional[AdamState] = None, start_iteration: int = 0,
             on_iteration: Optional[Callable[[dict], None]] = None,
             render_opts: Optional[RenderOptions] = None) -> TrainResult:
    """Minimize the composite loss over ``dataset`` for ``config.iterations`` steps.

    ``start_iteration``/``state`` resume an earlier run; the frame order and
    pruning schedule depend only on the absolute iteration index.
    """
    if not dataset:
        raise ValueError("optimize needs at least one frame")
    state = state or AdamState()
    sups: dict[str, Supervision] = {}
    log = []
    end = start_iteration + config.iterations
    for it in range(start_iteration, end):
        frame = dataset[frame_schedule(len(dataset), config.seed, it)]
        sup = sups.get(frame.id)
        if sup is None:
            sup = sups[frame.id] = build_supervision(frame, scene.class_names, occlusion, enhanced)
        out = render(scene, frame.camera, render_opts)
        breakdown, grads = backward(scene, frame, out, loss_weights, sup)
        scene, state = step(scene, grads, state, config)
        if config.prune_interval > 0 and (it + 1) % config.prune_interval == 0:
            keep = np.nonzero(scene.opacity >= config.prune_opacity_threshold)[0]
            if len(keep) < len(scene):
                scene = scene.subset(keep)
                state = state.subset(keep)
        entry = {"iteration": it, "frame": frame.id, **breakdown.to_dict(), "surfels": len(scene)}
        log.append(entry)
        if on_iteration is not None:
            on_iteration(entry)
    return TrainResult(scene, log, state, end)
