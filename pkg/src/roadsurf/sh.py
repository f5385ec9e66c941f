"""Real spherical harmonics up to degree 3 for view-dependent surfel color."""

from __future__ import annotations

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
      -0.4570457994644658, 1.445305721320277, -0.5900435899266435)

COLOR_OFFSET = 0.5


def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Evaluate the 16 basis functions at unit directions ``dirs`` (..., 3) -> (..., 16)."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    one = np.ones_like(x)
    return np.stack([
        C0 * one,
        -C1 * y, C1 * z, -C1 * x,
        C2[0] * x * y, C2[1] * y * z, C2[2] * (2 * zz - xx - yy), C2[3] * x * z, C2[4] * (xx - yy),
        C3[0] * y * (3 * xx - yy), C3[1] * x * y * z, C3[2] * y * (4 * zz - xx - yy),
        C3[3] * z * (2 * zz - 3 * xx - 3 * yy), C3[4] * x * (4 * zz - xx - yy),
        C3[5] * z * (xx - yy), C3[6] * x * (xx - 3 * yy),
    ], axis=-1)


def sh_basis_grad(dirs: np.ndarray) -> np.ndarray:
    """Jacobian of :func:`sh_basis` w.r.t. the direction components, (..., 16, 3)."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    o = np.zeros_like(x)
    rows = [
        (o, o, o),
        (o, -C1 + o, o), (o, o, C1 + o), (-C1 + o, o, o),
        (C2[0] * y, C2[0] * x, o),
        (o, C2[1] * z, C2[1] * y),
        (C2[2] * -2 * x, C2[2] * -2 * y, C2[2] * 4 * z),
        (C2[3] * z, o, C2[3] * x),
        (C2[4] * 2 * x, C2[4] * -2 * y, o),
        (C3[0] * 6 * x * y, C3[0] * (3 * xx - 3 * yy), o),
        (C3[1] * y * z, C3[1] * x * z, C3[1] * x * y),
        (C3[2] * -2 * x * y, C3[2] * (4 * zz - xx - 3 * yy), C3[2] * 8 * y * z),
        (C3[3] * -6 * x * z, C3[3] * -6 * y * z, C3[3] * (6 * zz - 3 * xx - 3 * yy)),
        (C3[4] * (4 * zz - 3 * xx - yy), C3[4] * -2 * x * y, C3[4] * 8 * x * z),
        (C3[5] * 2 * x * z, C3[5] * -2 * y * z, C3[5] * (xx - yy)),
        (C3[6] * (3 * xx - 3 * yy), C3[6] * -6 * x * y, o),
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def sh_eval(sh_coeffs: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """RGB for coefficient blocks (..., 3, 16) seen along unit ``view_dir`` (..., 3).

    Colors are decoded as ``clamp(sum_k coeff_k * Y_k(dir) + 0.5, 0, 1)``.
    """
    raw = np.einsum("...ck,...k->...c", sh_coeffs, sh_basis(np.asarray(view_dir, float)))
    return np.clip(raw + COLOR_OFFSET, 0.0, 1.0)


def rgb_to_dc(rgb) -> np.ndarray:
    """Degree-0 coefficient reproducing ``rgb`` from every direction."""
    return (np.asarray(rgb, float) - COLOR_OFFSET) / C0


def surfel_colors(sh: np.ndarray, centers: np.ndarray, origin: np.ndarray | None,
                  direction: np.ndarray | None = None):
    """Per-surfel colors for one view plus what the backward pass needs.

    Either ``origin`` (perspective: direction from camera center to each
    surfel) or a shared ``direction`` (orthographic) must be given.

    Returns:
        colors (N, 3), unclamped mask (N, 3), basis (N, 16), unit dirs (N, 3),
        distances (N,) or None.
    """
    if direction is not None:
        dirs = np.broadcast_to(np.asarray(direction, float) / np.linalg.norm(direction), centers.shape)
        dist = None
    else:
        rel = centers - origin
        dist = np.linalg.norm(rel, axis=1)
        dirs = rel / np.where(dist > 0, dist, 1.0)[:, None]
    basis = sh_basis(dirs)
    raw = np.einsum("nck,nk->nc", sh, basis) + COLOR_OFFSET
    inside = (raw > 0.0) & (raw < 1.0)
    return np.clip(raw, 0.0, 1.0), inside, basis, dirs, dist
