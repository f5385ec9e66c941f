"""Photometric, depth-smoothness, normal-consistency and semantic losses.

Every term is a per-pixel mean so the weights do not depend on resolution.
Functions return the value; the ``*_grad`` variants also return the
gradient with respect to the rendered buffer they consume.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels
from .rasterizer import Contributions


@dataclass
class LossWeights:
    lambda_c: float = 1.0
    lambda_d: float = 0.05
    lambda_n: float = 0.05
    lambda_s: float = 0.1

    def __post_init__(self) -> None:
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be nonnegative, got {v}")

    def scaled(self, k: float) -> "LossWeights":
        return LossWeights(*(k * v for v in asdict(self).values()))


@dataclass
class LossBreakdown:
    photometric: float
    depth_smooth: float
    normal_consistency: float
    semantic: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def _abs(x: np.ndarray, eps: float) -> np.ndarray:
    return np.abs(x) if eps == 0 else np.sqrt(x * x + eps * eps)


def _abs_grad(x: np.ndarray, eps: float) -> np.ndarray:
    return np.sign(x) if eps == 0 else x / np.sqrt(x * x + eps * eps)


def _count(mask: np.ndarray) -> int:
    n = int(np.count_nonzero(mask))
    if n == 0:
        raise ValueError("valid mask selects no pixels")
    return n


def photometric_loss(rendered: np.ndarray, target: np.ndarray, valid_mask: np.ndarray,
                     l1_eps: float = 0.0) -> float:
    """Mean over valid pixels of the L1 color difference summed over channels."""
    return photometric_loss_grad(rendered, target, valid_mask, l1_eps)[0]


def photometric_loss_grad(rendered, target, valid_mask, l1_eps: float = 0.0):
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch {rendered.shape} vs {target.shape}")
    n = _count(valid_mask)
    diff = rendered - target
    value = float(_abs(diff[valid_mask], l1_eps).sum() / n)
    grad = np.where(valid_mask[..., None], _abs_grad(diff, l1_eps), 0.0) / n
    return value, grad


def depth_smoothness_loss(contribs: Contributions) -> float:
    """Mean over all pixels of the blend-weighted pairwise depth spread on each ray."""
    per_pixel = _kernels.depth_pair_sums(contribs.offsets, contribs.depth, contribs.omega)
    return float(per_pixel.sum() / (contribs.height * contribs.width))


def normal_consistency_loss(contribs: Contributions, dominant_normal: np.ndarray,
                            normal_valid: np.ndarray, surfel_normals: np.ndarray) -> float:
    """Mean over valid-normal pixels of ``sum_i omega_i (1 - n_i . N)``."""
    h, w = contribs.height, contribs.width
    if not normal_valid.any():
        return 0.0
    pix = np.repeat(np.arange(h * w), np.diff(contribs.offsets))
    ndot = np.einsum("ij,ij->i", surfel_normals[contribs.surfel], dominant_normal.reshape(-1, 3)[pix])
    per_hit = contribs.omega * (1.0 - ndot) * normal_valid.reshape(-1)[pix]
    return float(per_hit.sum() / np.count_nonzero(normal_valid))


def normal_consistency_from_buffers(alpha, normal_sum, dominant_normal, normal_valid) -> float:
    """Same value as :func:`normal_consistency_loss` from the alpha and sum(omega n) buffers."""
    if not normal_valid.any():
        return 0.0
    per_pix = alpha - np.einsum("...k,...k->...", normal_sum, dominant_normal)
    return float(per_pix[normal_valid].sum() / np.count_nonzero(normal_valid))


def semantic_loss(rendered_semantic: np.ndarray, label_map: np.ndarray, valid_mask: np.ndarray) -> float:
    """Mean softmax cross-entropy between blended logits and labels over valid pixels."""
    return semantic_loss_grad(rendered_semantic, label_map, valid_mask)[0]


def semantic_loss_grad(rendered_semantic, label_map, valid_mask):
    n = _count(valid_mask)
    logits = rendered_semantic
    mx = logits.max(axis=-1, keepdims=True)
    ex = np.exp(logits - mx)
    z = ex.sum(axis=-1, keepdims=True)
    logp = logits - mx - np.log(z)
    labels = label_map.astype(np.int64)
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    value = float(-picked[valid_mask].sum() / n)
    grad = ex / z
    np.put_along_axis(grad, labels[..., None], np.take_along_axis(grad, labels[..., None], -1) - 1.0, -1)
    grad = np.where(valid_mask[..., None], grad, 0.0) / n
    return value, grad


def total_loss(photometric: float, depth_smooth: float, normal_consistency: float, semantic: float,
               weights: LossWeights) -> LossBreakdown:
    total = (weights.lambda_c * photometric + weights.lambda_d * depth_smooth
             + weights.lambda_n * normal_consistency + weights.lambda_s * semantic)
    return LossBreakdown(photometric, depth_smooth, normal_consistency, semantic, total)
