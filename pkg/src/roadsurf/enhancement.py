"""Per-class HSV statistics matching for cross-view color harmonization."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

STD_EPS = 1e-4
DEFAULT_ENHANCE_CLASSES = ("road", "lane_marking", "sidewalk", "curb")


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Hexcone RGB -> HSV on (..., 3) arrays; hue in degrees, gray pixels get hue 0."""
    rgb = np.clip(np.asarray(rgb, np.float64), 0.0, 1.0)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    hue = np.where(mx == r, ((g - b) / safe) % 6.0,
                   np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    hue = np.where(delta > 0, 60.0 * hue, 0.0)
    hue = np.where(hue >= 360.0, hue - 360.0, hue)
    sat = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([hue, sat, mx], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    hsv = np.asarray(hsv, np.float64)
    h = (hsv[..., 0] % 360.0) / 60.0
    s = np.clip(hsv[..., 1], 0.0, 1.0)
    v = np.clip(hsv[..., 2], 0.0, 1.0)
    sector = np.floor(h).astype(np.int64) % 6
    f = h - np.floor(h)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    table = np.stack([
        np.stack([v, t, p], -1), np.stack([q, v, p], -1), np.stack([p, v, t], -1),
        np.stack([p, q, v], -1), np.stack([t, p, v], -1), np.stack([v, p, q], -1),
    ], axis=-2)
    return np.take_along_axis(table, sector[..., None, None], axis=-2)[..., 0, :]


@dataclass
class ClassStats:
    class_id: int
    pixel_count: int
    value_mean: float
    value_std: float
    sat_mean: float
    sat_std: float

    @property
    def present(self) -> bool:
        return self.pixel_count >= 1

    @classmethod
    def absent(cls, class_id: int) -> "ClassStats":
        nan = float("nan")
        return cls(class_id, 0, nan, nan, nan, nan)

    def to_dict(self) -> dict:
        return asdict(self)


def class_stats(hsv: np.ndarray, label_map: np.ndarray, class_id: int,
                valid_mask: Optional[np.ndarray] = None) -> ClassStats:
    """Population mean/std of V and S over pixels of ``class_id`` inside ``valid_mask``."""
    sel = label_map == class_id
    if valid_mask is not None:
        sel &= valid_mask
    n = int(np.count_nonzero(sel))
    if n == 0:
        return ClassStats.absent(class_id)
    v = hsv[..., 2][sel]
    s = hsv[..., 1][sel]
    return ClassStats(class_id, n, float(v.mean()), float(v.std()), float(s.mean()), float(s.std()))


def transfer_channel(x: np.ndarray, src: tuple, ref: tuple, eps: float = STD_EPS) -> np.ndarray:
    """Shift/scale ``x`` from source (mean, std) to reference (mean, std), clamped to [0, 1]."""
    mu_v, sigma_v = src
    mu_r, sigma_r = ref
    if not sigma_v > eps:
        logger.warning("source std %.3g <= %.3g; leaving channel unchanged", sigma_v, eps)
        return np.asarray(x, np.float64).copy()
    return np.clip((sigma_r / sigma_v) * (np.asarray(x, np.float64) - mu_v) + mu_r, 0.0, 1.0)


@dataclass
class ReferenceStats:
    class_id: int
    pixel_count: int
    view_count: int
    value_mean: float
    value_std: float
    sat_mean: float
    sat_std: float

    def to_dict(self) -> dict:
        return asdict(self)


def compute_reference_stats(views: Sequence[tuple], classes: Iterable[int]) -> dict[int, ReferenceStats]:
    """Pixel-count weighted average of per-view class statistics.

    Args:
        views: ``(rgb, label_map, valid_mask)`` triples; ``valid_mask`` may be None.
        classes: Class ids to summarize. Classes never observed are omitted.
    """
    if not views:
        raise ValueError("reference statistics need at least one view")
    classes = list(classes)
    per_view = []
    for rgb, labels, valid in views:
        hsv = rgb_to_hsv(rgb)
        per_view.append([class_stats(hsv, labels, c, valid) for c in classes])
    out = {}
    for k, c in enumerate(classes):
        stats = [pv[k] for pv in per_view if pv[k].present]
        if not stats:
            continue
        w = np.array([s.pixel_count for s in stats], np.float64)
        total = w.sum()

        def avg(attr):
            return float(np.dot(w, [getattr(s, attr) for s in stats]) / total)

        out[c] = ReferenceStats(c, int(total), len(stats), avg("value_mean"), avg("value_std"),
                                avg("sat_mean"), avg("sat_std"))
    return out


def enhance_hsv(rgb: np.ndarray, label_map: np.ndarray, reference: Mapping[int, ReferenceStats],
                enhance_classes: Iterable[int], valid_mask: Optional[np.ndarray] = None):
    """HSV before and after per-class V/S transfer; the hue plane is passed through untouched."""
    hsv = rgb_to_hsv(rgb)
    out = hsv.copy()
    for c in enhance_classes:
        ref = reference.get(c)
        src = class_stats(hsv, label_map, c, valid_mask)
        if ref is None or not src.present:
            continue
        sel = label_map == c
        out[..., 2][sel] = transfer_channel(hsv[..., 2][sel], (src.value_mean, src.value_std),
                                            (ref.value_mean, ref.value_std))
        out[..., 1][sel] = transfer_channel(hsv[..., 1][sel], (src.sat_mean, src.sat_std),
                                            (ref.sat_mean, ref.sat_std))
    return hsv, out


def enhance_frame(rgb: np.ndarray, label_map: np.ndarray, reference: Mapping[int, ReferenceStats],
                  enhance_classes: Iterable[int], valid_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Enhanced RGB; pixels of classes outside ``enhance_classes`` are returned bit-identical."""
    enhance_classes = list(enhance_classes)
    _, out = enhance_hsv(rgb, label_map, reference, enhance_classes, valid_mask)
    result = np.array(rgb, dtype=np.float64, copy=True)
    touched = np.isin(label_map, enhance_classes)
    result[touched] = hsv_to_rgb(out[touched])
    return result
