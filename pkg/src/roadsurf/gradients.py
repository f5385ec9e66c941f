"""Analytic gradients of the composite training loss and a finite-difference oracle."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import _kernels
from .losses import (
    LossBreakdown,
    LossWeights,
    depth_smoothness_loss,
    normal_consistency_from_buffers,
    photometric_loss_grad,
    semantic_loss_grad,
    total_loss,
)
from .rasterizer import RenderOptions, RenderOutput, render
from .rng import substream
from .scene import Frame, Scene, look_camera, rotate_vectors

PARAM_CLASSES = ("center", "scales", "rotation", "opacity", "sh", "semantic")


@dataclass
class ParamGrads:
    center: np.ndarray  # (N, 3)
    scales: np.ndarray  # (N, 2)
    rotation: np.ndarray  # (N, 3) axis-angle increment applied to the tangent frame
    opacity: np.ndarray  # (N,)
    sh: np.ndarray  # (N, 3, 16)
    semantic: np.ndarray  # (N, C)

    @classmethod
    def zeros(cls, scene: Scene) -> "ParamGrads":
        n = len(scene)
        return cls(np.zeros((n, 3)), np.zeros((n, 2)), np.zeros((n, 3)), np.zeros(n),
                   np.zeros((n, 3, 16)), np.zeros((n, scene.class_count)))

    def items(self):
        return ((f.name, getattr(self, f.name)) for f in fields(self))

    def check_finite(self) -> None:
        for name, g in self.items():
            bad = ~np.isfinite(g)
            if bad.any():
                idx = int(np.argwhere(bad)[0][0])
                raise FloatingPointError(f"non-finite gradient for surfel {idx}, parameter {name}")


@dataclass
class Supervision:
    """Per-frame targets; ``valid`` gates the photometric term, ``semantic_valid`` the semantic one."""

    target: np.ndarray
    valid: np.ndarray
    labels: np.ndarray
    semantic_valid: np.ndarray


def default_supervision(frame: Frame) -> Supervision:
    h, w = frame.label_map.shape
    valid = np.ones((h, w), bool) if frame.occluder_mask is None else ~frame.occluder_mask
    return Supervision(frame.image, valid, frame.label_map, valid)


def loss_terms(out: RenderOutput, sup: Supervision, weights: LossWeights, l1_eps: float = 0.0):
    """Loss breakdown and the per-pixel upstream gradients of the rendered buffers."""
    lc, g_color = photometric_loss_grad(out.color, sup.target, sup.valid, l1_eps)
    g_color = np.where(out.background_mask[..., None], 0.0, g_color) * weights.lambda_c
    if sup.semantic_valid.any():
        ls, g_sem = semantic_loss_grad(out.semantic, sup.labels, sup.semantic_valid)
        g_sem = g_sem * weights.lambda_s
    else:
        ls, g_sem = 0.0, np.zeros_like(out.semantic)
    ld = depth_smoothness_loss(out.contributions)
    ln = normal_consistency_from_buffers(out.alpha, out.normal_sum, out.dominant_normal, out.normal_valid)
    return total_loss(lc, ld, ln, ls, weights), g_color, g_sem


def _depth_grad_from_normals(out: RenderOutput, w_normal: float) -> np.ndarray:
    """dL_n/dDepth through the depth-derived dominant normals."""
    c = out.cache
    h, w = out.depth.shape
    valid = out.normal_valid
    gN = np.where(valid[..., None], -w_normal * out.normal_sum, 0.0)
    unit = c["unit"]
    norm = np.where(valid, c["norm"], 1.0)
    gN_raw = gN * c["sign"][..., None]
    g_cross = (gN_raw - unit * np.sum(unit * gN_raw, axis=-1, keepdims=True)) / norm[..., None]
    g_cross = np.where(valid[..., None], g_cross, 0.0)
    g_px = np.cross(c["py"], g_cross)
    g_py = np.cross(g_cross, c["px"])
    g_pts = np.zeros((h, w, 3))
    g_pts[:, 2:] += 0.5 * g_px[:, 1:-1]
    g_pts[:, :-2] -= 0.5 * g_px[:, 1:-1]
    g_pts[2:, :] += 0.5 * g_py[1:-1, :]
    g_pts[:-2, :] -= 0.5 * g_py[1:-1, :]
    return np.einsum("hwk,hwk->hw", g_pts, c["ray_d"].reshape(h, w, 3))


def backward(scene: Scene, frame: Frame, render_out: RenderOutput, loss_weights: LossWeights,
             supervision: Optional[Supervision] = None, l1_eps: float = 0.0):
    """Total loss and its gradient with respect to every surfel parameter.

    Args:
        scene: The scene that produced ``render_out``.
        frame: Frame whose camera was rendered; supplies default supervision.
        render_out: Output of :func:`render` with contributions retained.
        loss_weights: Term weights.
        supervision: Explicit targets/masks; defaults to the raw frame image
            with occluder pixels excluded.
        l1_eps: Smoothing for the photometric absolute value (0 = exact L1).

    Returns:
        (LossBreakdown, ParamGrads)
    """
    if render_out.contributions is None:
        raise ValueError("backward needs a render with retained contributions")
    sup = supervision or default_supervision(frame)
    breakdown, g_color, g_sem = loss_terms(render_out, sup, loss_weights, l1_eps)
    grads = ParamGrads.zeros(scene)
    if len(scene) == 0:
        return breakdown, grads
    h, w = render_out.depth.shape
    n_valid_normals = int(np.count_nonzero(render_out.normal_valid))
    w_normal = loss_weights.lambda_n / n_valid_normals if n_valid_normals else 0.0
    w_depth = loss_weights.lambda_d / (h * w)
    g_depth = _depth_grad_from_normals(render_out, w_normal) if w_normal else np.zeros((h, w))

    ct = render_out.contributions
    cache = render_out.cache
    nh = ct.hit_count
    c = scene.class_count
    h_alpha = np.zeros(nh)
    h_center = np.zeros((nh, 3))
    h_scale = np.zeros((nh, 2))
    h_rot = np.zeros((nh, 3))
    h_color = np.zeros((nh, 3))
    h_sem = np.zeros((nh, c))
    npix = h * w
    _kernels.backward_rays(
        cache["ray_o"], cache["ray_d"], np.ascontiguousarray(scene.centers),
        np.ascontiguousarray(scene.tangent_u), np.ascontiguousarray(scene.tangent_v),
        cache["plane_normals"], np.ascontiguousarray(scene.scales), np.ascontiguousarray(scene.opacity),
        np.ascontiguousarray(cache["colors"]), np.ascontiguousarray(scene.semantic), cache["normals"],
        ct.offsets, ct.surfel, ct.u, ct.v, ct.depth, ct.weight, ct.omega,
        render_out.alpha.reshape(npix), render_out.depth.reshape(npix),
        np.ascontiguousarray(g_color.reshape(npix, 3)), np.ascontiguousarray(g_sem.reshape(npix, c)),
        np.ascontiguousarray(g_depth.reshape(npix)),
        np.ascontiguousarray(render_out.dominant_normal.reshape(npix, 3)),
        render_out.normal_valid.reshape(npix), w_depth, w_normal,
        h_alpha, h_center, h_scale, h_rot, h_color, h_sem,
    )
    g_surf_color = np.zeros((len(scene), 3))
    _kernels.reduce_hits(ct.surfel, h_alpha, h_center, h_scale, h_rot, h_color, h_sem,
                         grads.opacity, grads.center, grads.scales, grads.rotation, g_surf_color,
                         grads.semantic)
    _color_chain(scene, cache, g_surf_color, grads)
    return breakdown, grads


def _color_chain(scene: Scene, cache: dict, g_colors: np.ndarray, grads: ParamGrads) -> None:
    """Push per-surfel color gradients into SH coefficients and, through the view direction, centers."""
    from .sh import sh_basis_grad

    g_raw = g_colors * cache["inside"]
    grads.sh += g_raw[:, :, None] * cache["basis"][:, None, :]
    if cache.get("dist") is None:
        return
    dirs = cache["dirs"]
    jac = sh_basis_grad(dirs)  # (N, 16, 3)
    g_dir = np.einsum("nc,nck,nkj->nj", g_raw, scene.sh, jac)
    g_dir -= dirs * np.sum(dirs * g_dir, axis=1, keepdims=True)
    grads.center += g_dir / cache["dist"][:, None]


def evaluate(scene: Scene, frame: Frame, weights: LossWeights, supervision: Optional[Supervision] = None,
             opts: Optional[RenderOptions] = None, l1_eps: float = 0.0) -> LossBreakdown:
    out = render(scene, frame.camera, opts)
    sup = supervision or default_supervision(frame)
    return loss_terms(out, sup, weights, l1_eps)[0]


def _perturbed(scene: Scene, cls: str, idx: tuple, delta: float) -> Scene:
    s = scene.copy()
    i = idx[0]
    if cls == "center":
        s.centers[idx] += delta
    elif cls == "scales":
        s.scales[idx] += delta
    elif cls == "opacity":
        s.opacity[idx] += delta
    elif cls == "sh":
        s.sh[idx] += delta
    elif cls == "semantic":
        s.semantic[idx] += delta
    elif cls == "rotation":
        rv = np.zeros((1, 3))
        rv[0, idx[1]] = delta
        s.tangent_u[i] = rotate_vectors(s.tangent_u[i:i + 1], rv)[0]
        s.tangent_v[i] = rotate_vectors(s.tangent_v[i:i + 1], rv)[0]
    else:
        raise KeyError(cls)
    return s


@dataclass
class GradCheckReport:
    max_rel_error: dict
    checked: dict
    worst: dict
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(err < self.tolerance for err in self.max_rel_error.values())

    def failing(self) -> list[str]:
        return [k for k, err in self.max_rel_error.items() if not err < self.tolerance]


def finite_diff_check(scene: Scene, frame: Frame, loss_weights: LossWeights, step: float = 1e-4,
                      supervision: Optional[Supervision] = None, magnitude_floor: float = 1e-6,
                      tolerance: float = 1e-4, l1_eps: float = 1e-8,
                      analytic: Optional[ParamGrads] = None) -> GradCheckReport:
    """Compare analytic gradients with central differences on every scalar parameter.

    Relative error is ``|a - f| / max(|a|, |f|)``, counted only where that
    denominator exceeds ``magnitude_floor``.
    """
    sup = supervision or default_supervision(frame)
    if analytic is None:
        out = render(scene, frame.camera)
        _, analytic = backward(scene, frame, out, loss_weights, sup, l1_eps)
    errs = {k: 0.0 for k in PARAM_CLASSES}
    checked = {k: 0 for k in PARAM_CLASSES}
    worst: dict = {}
    for cls in PARAM_CLASSES:
        a_arr = getattr(analytic, cls)
        for idx in np.ndindex(a_arr.shape):
            lp = evaluate(_perturbed(scene, cls, idx, step), frame, loss_weights, sup, l1_eps=l1_eps).total
            lm = evaluate(_perturbed(scene, cls, idx, -step), frame, loss_weights, sup, l1_eps=l1_eps).total
            fd = (lp - lm) / (2 * step)
            a = float(a_arr[idx])
            denom = max(abs(a), abs(fd))
            if denom <= magnitude_floor:
                continue
            checked[cls] += 1
            rel = abs(a - fd) / denom
            if rel > errs[cls]:
                errs[cls] = rel
                worst[cls] = {"index": list(idx), "analytic": a, "numeric": fd}
    return GradCheckReport(errs, checked, worst, tolerance)


def random_check_case(seed: int, n_surfels: int = 8, size: int = 16, class_count: int = 4):
    """Random scene, frame and supervision for gradient checking.

    Surfels are stacked near-horizontal layers whose cutoff disks cover the
    whole image and never intersect each other inside the view frustum, and
    targets stay clear of the rendered colors, so the loss is smooth in every
    parameter (no cutoff, depth-order or L1 kinks within a finite-difference step).
    """
    rng = substream(seed, "gradcheck")
    cam = look_camera([0.0, 0.0, 2.0], 0.0, np.pi / 2, width=size, height=size, fx=float(size))
    z = np.sort(rng.uniform(-0.4, 0.4, n_surfels))
    z = z + 0.1 * np.arange(n_surfels)  # layer gap >= 0.1 m
    centers = np.column_stack([rng.uniform(-0.3, 0.3, (n_surfels, 2)), z])
    rot = rng.normal(0.0, 0.01, (n_surfels, 3))
    tu = rotate_vectors(np.tile([1.0, 0.0, 0.0], (n_surfels, 1)), rot)
    tv = rotate_vectors(np.tile([0.0, 1.0, 0.0], (n_surfels, 1)), rot)
    scales = rng.uniform(1.0, 1.6, (n_surfels, 2))
    opacity = rng.uniform(0.2, 0.8, n_surfels)
    sh = rng.normal(0.0, 0.15, (n_surfels, 3, 16))
    sem = rng.normal(0.0, 1.0, (n_surfels, class_count))
    scene = Scene(centers, scales, tu, tv, opacity, sh, sem, [f"class{i}" for i in range(class_count)])
    # keep every target channel 0.05-0.3 away from the render: the L1 kink at zero
    # residual is not differentiable and central differences straddling it disagree
    color = render(scene, cam, RenderOptions(retain_contributions=False)).color
    gap = rng.uniform(0.05, 0.3, color.shape)
    target = color + np.where(color < 0.5, gap, -gap)
    labels = rng.integers(0, class_count, (size, size))
    frame = Frame("check", target, cam, labels)
    valid = rng.uniform(size=(size, size)) > 0.1
    sup = Supervision(target, valid, labels, rng.uniform(size=(size, size)) > 0.1)
    return scene, frame, sup
