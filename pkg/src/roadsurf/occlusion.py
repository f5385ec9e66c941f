"""Occluder masks and per-frame supervision targets.

Segmentation and inpainting happen upstream; this module only consumes
their outputs (label maps, optional mask files, optional inpainted frames).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Optional

import numpy as np
from scipy import ndimage

from .gradients import Supervision
from .scene import Frame

DEFAULT_OCCLUDER_CLASSES = ("vehicle", "pedestrian", "rider", "bicycle")
DEFAULT_NON_GROUND_CLASSES = ("sky",)
DEFAULT_DILATION = 4


class DatasetError(ValueError):
    pass


@dataclass
class OccluderMask:
    mask: np.ndarray  # True = excluded from supervision
    provenance: str  # "derived-from-labels" | "loaded-from-file"


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx * xx + yy * yy <= r * r


def build_occluder_mask(label_map: np.ndarray, occluder_classes: Iterable[int],
                        dilation_radius: int = DEFAULT_DILATION) -> OccluderMask:
    """Pixels of any occluder class, grown by a disk of ``dilation_radius`` pixels."""
    mask = np.isin(label_map, np.fromiter(occluder_classes, dtype=np.int64))
    if dilation_radius > 0 and mask.any():
        mask = ndimage.binary_dilation(mask, structure=disk(dilation_radius))
    return OccluderMask(mask, "derived-from-labels")


@dataclass
class OcclusionConfig:
    use_inpainted: bool = True
    use_enhanced: bool = True
    occluder_classes: tuple = DEFAULT_OCCLUDER_CLASSES
    non_ground_classes: tuple = DEFAULT_NON_GROUND_CLASSES
    dilation_radius: int = DEFAULT_DILATION


def _class_ids(names: Iterable[str], class_names: list[str]) -> list[int]:
    ids = []
    for name in names:
        if name not in class_names:
            raise DatasetError(f"unknown class name {name!r}")
        ids.append(class_names.index(name))
    return ids


def frame_occluder_mask(frame: Frame, class_names: list[str], cfg: OcclusionConfig) -> OccluderMask:
    if frame.occluder_mask is not None:
        return OccluderMask(frame.occluder_mask.astype(bool), "loaded-from-file")
    return build_occluder_mask(frame.label_map, _class_ids(cfg.occluder_classes, class_names),
                               cfg.dilation_radius)


def supervision_target(frame: Frame, class_names: list[str], cfg: Optional[OcclusionConfig] = None,
                       enhanced: Optional[Mapping[str, np.ndarray]] = None) -> tuple[np.ndarray, np.ndarray]:
    """Target image and photometric validity mask for one frame.

    Source priority: enhanced inpainted image, inpainted image, raw image.
    Occluder pixels are excluded only when the raw image is the base.
    """
    sup = build_supervision(frame, class_names, cfg, enhanced)
    return sup.target, sup.valid


def build_supervision(frame: Frame, class_names: list[str], cfg: Optional[OcclusionConfig] = None,
                      enhanced: Optional[Mapping[str, np.ndarray]] = None) -> Supervision:
    cfg = cfg or OcclusionConfig()
    occ = frame_occluder_mask(frame, class_names, cfg).mask
    non_ground = np.isin(frame.label_map, _class_ids(cfg.non_ground_classes, class_names))
    inpainted = cfg.use_inpainted and frame.inpainted_image is not None
    target = frame.inpainted_image if inpainted else frame.image
    if cfg.use_enhanced and enhanced is not None:
        try:
            target = enhanced[frame.id]
        except KeyError:
            raise DatasetError(f"frame {frame.id}: enhanced image missing") from None
    valid = ~non_ground if inpainted else ~(non_ground | occ)
    if not valid.any():
        raise DatasetError(f"frame {frame.id}: supervision mask excludes every pixel")
    return Supervision(target, valid, frame.label_map, ~(non_ground | occ))
