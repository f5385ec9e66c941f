"""Analytic road scenes and exact ground-truth camera views.

The ground is a height field ``z(x)`` (flat, linear ramp or sinusoid along
the driving direction) painted with a procedural asphalt texture, lane
stripes, curbs and sidewalks. Views are rendered by exact ray/surface
intersection so the datasets double as oracles for reconstruction metrics.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .rng import substream
from .scene import Camera, Frame, look_camera

CLASS_NAMES = ["road", "lane_marking", "sidewalk", "curb", "vehicle", "pedestrian", "rider",
               "bicycle", "sky"]
ROAD, MARKING, SIDEWALK, CURB, VEHICLE = 0, 1, 2, 3, 4
SKY = CLASS_NAMES.index("sky")
SKY_COLOR = (0.55, 0.7, 0.9)
BISECT_TOL = 1e-6

DEFAULT_SPEC: dict = {
    "seed": 0,
    "extent": {"x": [-6.0, 16.0], "y": [-6.0, 6.0]},
    "elevation": {"kind": "flat", "z0": 0.0, "gradient": 0.02, "amplitude": 0.05, "wavelength": 6.0},
    "texture": {
        "asphalt": [0.32, 0.32, 0.34],
        "variation": 0.12,
        "wavelengths": [0.9, 1.7, 3.1],
        "marking": [0.85, 0.85, 0.8],
        "sidewalk": [0.62, 0.6, 0.56],
        "curb": [0.74, 0.74, 0.72],
        "stripes": [
            {"y": 0.0, "width": 0.15, "dash": 1.0, "gap": 1.0},
            {"y": 1.2, "width": 0.12},
            {"y": -1.2, "width": 0.12},
        ],
    },
    "layout": {"road_half_width": 1.75, "curb_width": 0.15},
    "camera": {"width": 128, "height": 128, "fx": 80.0, "mount_height": 1.5, "pitch_deg": 70.0},
    "trajectory": {"start": [0.0, 0.0], "end": [5.75, 0.0], "count": 24, "heldout_every": 6},
    "occluders": [],
    "lighting": None,
    "bev": {"resolution": 0.05, "x": [0.0, 7.5], "y": [-1.0, 1.0]},
}


class SpecError(ValueError):
    pass


def merge_spec(overrides: Optional[dict]) -> dict:
    spec = copy.deepcopy(DEFAULT_SPEC)

    def merge(dst, src):
        for k, v in src.items():
            if isinstance(v, dict) and isinstance(dst.get(k), dict):
                merge(dst[k], v)
            else:
                dst[k] = copy.deepcopy(v)

    merge(spec, overrides or {})
    validate_spec(spec)
    return spec


def validate_spec(spec: dict) -> None:
    ex = spec["extent"]
    for axis in ("x", "y"):
        lo, hi = ex[axis]
        if not hi > lo:
            raise SpecError(f"extent.{axis} must have positive size, got [{lo}, {hi}]")
    for i, st in enumerate(spec["texture"]["stripes"]):
        if not st["width"] > 0:
            raise SpecError(f"texture.stripes[{i}].width must be positive")
    kind = spec["elevation"]["kind"]
    if kind not in ("flat", "ramp", "sinusoid"):
        raise SpecError(f"elevation.kind must be flat, ramp or sinusoid, got {kind!r}")
    if kind == "sinusoid" and not spec["elevation"]["wavelength"] > 0:
        raise SpecError("elevation.wavelength must be positive")
    cam = spec["camera"]
    if not (cam["fx"] > 0 and cam["width"] > 0 and cam["height"] > 0):
        raise SpecError("camera intrinsics must be positive")
    if not cam["mount_height"] > 0:
        raise SpecError("camera.mount_height must be positive")
    if int(spec["trajectory"]["count"]) < 1:
        raise SpecError("trajectory.count must be at least 1")
    if not spec["bev"]["resolution"] > 0:
        raise SpecError("bev.resolution must be positive")
    light = spec.get("lighting")
    if light:
        if min(light.get("gain", [1, 1])) <= 0:
            raise SpecError("lighting gains must be positive")


@dataclass
class AnalyticScene:
    spec: dict
    _waves: np.ndarray = field(repr=False, default=None)

    def __post_init__(self) -> None:
        rng = substream(self.spec["seed"], "texture")
        lams = np.asarray(self.spec["texture"]["wavelengths"], float)
        angles = rng.uniform(0, np.pi, len(lams))
        phases = rng.uniform(0, 2 * np.pi, len(lams))
        self._waves = np.stack([2 * np.pi / lams * np.cos(angles), 2 * np.pi / lams * np.sin(angles), phases], 1)

    # geometry
    def elevation(self, x, y=None) -> np.ndarray:
        e = self.spec["elevation"]
        x = np.asarray(x, float)
        if e["kind"] == "flat":
            return np.full_like(x, float(e["z0"]))
        if e["kind"] == "ramp":
            return e["z0"] + e["gradient"] * x
        return e["z0"] + e["amplitude"] * np.sin(2 * np.pi * x / e["wavelength"])

    def elevation_bounds(self) -> tuple[float, float]:
        e = self.spec["elevation"]
        if e["kind"] == "flat":
            return e["z0"], e["z0"]
        if e["kind"] == "sinusoid":
            return e["z0"] - abs(e["amplitude"]), e["z0"] + abs(e["amplitude"])
        xs = np.asarray(self.spec["extent"]["x"], float)
        zs = e["z0"] + e["gradient"] * xs
        return float(zs.min()), float(zs.max())

    def inside(self, x, y) -> np.ndarray:
        ex = self.spec["extent"]
        return (x >= ex["x"][0]) & (x <= ex["x"][1]) & (y >= ex["y"][0]) & (y <= ex["y"][1])

    # appearance
    def label(self, x, y) -> np.ndarray:
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        lay = self.spec["layout"]
        half = lay["road_half_width"]
        ay = np.abs(y)
        out = np.full(np.broadcast(x, y).shape, ROAD, np.int64)
        out[ay > half] = CURB
        out[ay > half + lay["curb_width"]] = SIDEWALK
        for st in self.spec["texture"]["stripes"]:
            on = np.abs(y - st["y"]) <= st["width"] / 2
            if st.get("dash"):
                period = st["dash"] + st.get("gap", st["dash"])
                on &= np.mod(x, period) < st["dash"]
            out[on & (ay <= half)] = MARKING
        return out

    def color(self, x, y) -> np.ndarray:
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        tex = self.spec["texture"]
        lab = self.label(x, y)
        base = np.empty(lab.shape + (3,))
        base[:] = tex["asphalt"]
        base[lab == MARKING] = tex["marking"]
        base[lab == SIDEWALK] = tex["sidewalk"]
        base[lab == CURB] = tex["curb"]
        k = self._waves
        noise = np.zeros(lab.shape)
        for kx, ky, ph in k:
            noise += np.sin(kx * x + ky * y + ph)
        noise /= max(len(k), 1)
        return np.clip(base * (1.0 + tex["variation"] * noise)[..., None], 0.0, 1.0)

    # rays
    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Ray parameter of the first surface hit per ray (inf on a miss)."""
        e = self.spec["elevation"]
        ox, oz = origins[..., 0], origins[..., 2]
        dx, dz = dirs[..., 0], dirs[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            if e["kind"] == "flat":
                t = (e["z0"] - oz) / dz
            elif e["kind"] == "ramp":
                t = (e["z0"] + e["gradient"] * ox - oz) / (dz - e["gradient"] * dx)
            else:
                t = self._bisect(origins, dirs)
        t = np.where(np.isfinite(t) & (t > 0), t, np.inf)
        return t

    def _height_gap(self, origins, dirs, t):
        p = origins + t[..., None] * dirs
        return p[..., 2] - self.elevation(p[..., 0])

    def _bisect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        lo_z, hi_z = self.elevation_bounds()
        dz = dirs[..., 2]
        oz = origins[..., 2]
        down = dz < 0
        safe = np.where(down, dz, -1.0)
        t_top = np.where(down, np.maximum((hi_z - oz) / safe, 0.0), np.inf)
        t_bot = np.where(down, (lo_z - oz) / safe, np.inf)
        out = np.full(dz.shape, np.inf)
        if not down.any():
            return out
        o, d = origins[down], dirs[down]
        a, b = t_top[down], t_bot[down]
        # coarse march between the slab planes to bracket the first crossing
        wl = float(self.spec["elevation"]["wavelength"])
        horiz = np.linalg.norm(d[:, :2], axis=1)
        n_steps = int(np.ceil(np.max((b - a) * horiz) / (wl / 32))) + 1
        lo = a.copy()
        hi = np.full_like(a, np.nan)
        prev = lo.copy()
        for k in range(1, n_steps + 1):
            t = a + (b - a) * k / n_steps
            gap = self._height_gap(o, d, t)
            newly = np.isnan(hi) & (gap <= 0)
            hi[newly] = t[newly]
            lo[newly] = prev[newly]
            prev = t
        found = ~np.isnan(hi)
        lo, hi = lo[found], hi[found]
        of, df = o[found], d[found]
        scale = np.linalg.norm(df, axis=1)
        while True:
            span = (hi - lo) * scale
            if span.max(initial=0.0) < BISECT_TOL * 1e-3:
                break
            mid = 0.5 * (lo + hi)
            above = self._height_gap(of, df, mid) > 0
            lo = np.where(above, mid, lo)
            hi = np.where(above, hi, mid)
        res = np.full(len(o), np.inf)
        res[found] = 0.5 * (lo + hi)
        out[down] = res
        return out


def generate_scene(spec: Optional[dict] = None) -> AnalyticScene:
    return AnalyticScene(merge_spec(spec))


def trajectory_cameras(scene: AnalyticScene) -> list[Camera]:
    spec = scene.spec
    traj, cam = spec["trajectory"], spec["camera"]
    start = np.asarray(traj["start"], float)
    end = np.asarray(traj["end"], float)
    count = int(traj["count"])
    heading = end - start
    yaw = float(np.arctan2(heading[1], heading[0])) if np.linalg.norm(heading) > 0 else 0.0
    cams = []
    for k in range(count):
        f = k / (count - 1) if count > 1 else 0.0
        xy = start + f * heading
        z = float(scene.elevation(np.array([xy[0]]))[0]) + cam["mount_height"]
        cams.append(look_camera([xy[0], xy[1], z], yaw, np.deg2rad(cam["pitch_deg"]),
                                width=int(cam["width"]), height=int(cam["height"]), fx=float(cam["fx"])))
    return cams


def heldout_ids(spec: dict) -> list[str]:
    every = int(spec["trajectory"].get("heldout_every") or 0)
    count = int(spec["trajectory"]["count"])
    if every <= 0:
        return []
    return [frame_id(k) for k in range(every // 2, count, every)]


def frame_id(k: int) -> str:
    return f"{k:04d}"


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid used on disk so in-memory and loaded datasets agree bitwise."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def render_gt_views(scene: AnalyticScene, cameras: Sequence[Camera],
                    ids: Optional[Sequence[str]] = None) -> list[Frame]:
    frames = []
    for k, cam in enumerate(cameras):
        o, d = cam.rays()
        t = scene.intersect(o, d)
        p = o + np.where(np.isfinite(t), t, 0.0)[..., None] * d
        hit = np.isfinite(t) & scene.inside(p[..., 0], p[..., 1])
        img = np.empty(t.shape + (3,))
        img[:] = SKY_COLOR
        labels = np.full(t.shape, SKY, np.int64)
        img[hit] = scene.color(p[hit][:, 0], p[hit][:, 1])
        labels[hit] = scene.label(p[hit][:, 0], p[hit][:, 1])
        depth = np.where(hit, t, np.inf)
        fid = ids[k] if ids is not None else frame_id(k)
        frames.append(Frame(fid, quantize(img), cam, labels, depth=depth))
    return frames


def _ray_box(o, d, bmin, bmax):
    """Slab test; returns (t_near, hit_axis) with inf where the ray misses."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (bmin - o) * inv
        t1 = (bmax - o) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    near = tmin.max(axis=-1)
    far = tmax.min(axis=-1)
    axis = tmin.argmax(axis=-1)
    ok = (far >= near) & (far > 0) & (near > 0)
    return np.where(ok, near, np.inf), axis


FACE_SHADE = np.array([0.8, 0.65, 1.0])


def add_occluders(frames: Sequence[Frame], occluders: Sequence[dict]) -> list[Frame]:
    """Composite flat-shaded boxes into frames and keep the clean image as the inpainting oracle.

    Each occluder is ``{"box_min": xyz, "box_max": xyz, "color": rgb, "frames": ids|"all"}``.
    """
    out = []
    for fr in frames:
        fr = copy.copy(fr)
        for occ in occluders:
            sel = occ.get("frames", "all")
            if sel != "all" and fr.id not in sel:
                continue
            o, d = fr.camera.rays()
            t, axis = _ray_box(o, d, np.asarray(occ["box_min"], float), np.asarray(occ["box_max"], float))
            ground = fr.depth if fr.depth is not None else np.full(t.shape, np.inf)
            cover = np.isfinite(t) & (t < ground)
            if not cover.any():
                continue
            if fr.inpainted_image is None:
                fr.inpainted_image = fr.image.copy()
            img = fr.image.copy()
            shade = FACE_SHADE[axis][cover]
            img[cover] = quantize(np.asarray(occ["color"], float)[None, :] * shade[:, None])
            labels = fr.label_map.copy()
            labels[cover] = VEHICLE
            fr.image = img
            fr.label_map = labels
        out.append(fr)
    return out


def add_lighting_variation(frames: Sequence[Frame], spec: Optional[dict], seed: int):
    """Per-frame ``clamp(gain * x**gamma)`` on raw and inpainted images.

    ``spec`` holds ``gain``/``gamma`` ranges sampled per frame, or an explicit
    ``per_frame`` mapping id -> {gain, gamma}. Returns (frames, applied params).
    """
    if not spec:
        return list(frames), {}
    rng = substream(seed, "lighting")
    gain_rng = spec.get("gain", [1.0, 1.0])
    gamma_rng = spec.get("gamma", [1.0, 1.0])
    explicit = spec.get("per_frame", {})
    out, applied = [], {}
    for fr in frames:
        g = float(rng.uniform(*gain_rng))
        gam = float(rng.uniform(*gamma_rng))
        if fr.id in explicit:
            g = float(explicit[fr.id].get("gain", g))
            gam = float(explicit[fr.id].get("gamma", gam))
        if g <= 0:
            raise SpecError(f"frame {fr.id}: gain must be positive")
        fr = copy.copy(fr)
        fr.image = quantize(g * np.power(fr.image, gam))
        if fr.inpainted_image is not None:
            fr.inpainted_image = quantize(g * np.power(fr.inpainted_image, gam))
        applied[fr.id] = {"gain": g, "gamma": gam}
        out.append(fr)
    return out, applied


@dataclass
class SyntheticDataset:
    spec: dict
    scene: AnalyticScene
    frames: list[Frame]
    heldout: list[str]
    lighting: dict

    @property
    def train_frames(self) -> list[Frame]:
        return [f for f in self.frames if f.id not in self.heldout]

    @property
    def heldout_frames(self) -> list[Frame]:
        return [f for f in self.frames if f.id in self.heldout]


def build_dataset(spec: Optional[dict] = None) -> SyntheticDataset:
    scene = generate_scene(spec)
    cams = trajectory_cameras(scene)
    frames = render_gt_views(scene, cams)
    frames = add_occluders(frames, scene.spec.get("occluders") or [])
    frames, applied = add_lighting_variation(frames, scene.spec.get("lighting"), scene.spec["seed"])
    return SyntheticDataset(scene.spec, scene, frames, heldout_ids(scene.spec), applied)


def gt_bev(scene: AnalyticScene, grid) -> dict:
    """Ground-truth RGB, labels and elevation sampled at BEV cell centers."""
    x, y = grid.cell_centers()
    return {
        "rgb": quantize(scene.color(x, y)),
        "semantic": scene.label(x, y),
        "elevation": scene.elevation(x, y).astype(np.float64) + np.zeros_like(x),
    }
