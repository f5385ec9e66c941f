"""Dataset directories, image/PFM codecs and surfel checkpoints."""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .scene import SH_COEFFS, Camera, Frame, Scene

CHECKPOINT_MAGIC = b"SRF1"
DEPTH_PNG_SCALE = 1000.0  # uint16 depth PNG stores millimeters


class DatasetFormatError(ValueError):
    pass


# ---------------------------------------------------------------- images

def read_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), np.float64) / 255.0


def write_rgb(path: Path, img: np.ndarray) -> None:
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, "RGB").save(path, optimize=False)


def read_gray(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.int64) if im.mode in ("L", "P") else np.asarray(im.convert("L"), np.int64)


def write_labels(path: Path, labels: np.ndarray, palette: Optional[list] = None) -> None:
    im = Image.fromarray(np.asarray(labels, np.uint8), "P" if palette else "L")
    if palette:
        flat = [c for rgb in palette for c in rgb]
        im.putpalette(flat + [0] * (768 - len(flat)))
    im.save(path, optimize=False)


def write_depth_png(path: Path, depth: np.ndarray) -> None:
    mm = np.where(np.isfinite(depth), np.round(depth * DEPTH_PNG_SCALE), 0)
    Image.fromarray(np.clip(mm, 0, 65535).astype(np.uint16)).save(path)


def read_depth_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, np.float64) / DEPTH_PNG_SCALE


def write_pfm(path: Path, data: np.ndarray) -> None:
    """Single-channel little-endian PFM (rows stored bottom to top)."""
    data = np.asarray(data, "<f4")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise DatasetFormatError(f"{path}: not a PFM file")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        chans = 3 if header == b"PF" else 1
        data = np.frombuffer(f.read(), dtype=dtype, count=w * h * chans)
    shape = (h, w, 3) if chans == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float64)


def write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: Path):
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------- datasets

def load_classes(root: Path) -> list[str]:
    path = Path(root) / "classes.json"
    if not path.exists():
        raise DatasetFormatError(f"{root}: classes.json missing")
    raw = read_json(path)
    return [raw[str(i)] for i in range(len(raw))]


def save_dataset(root: Path, frames: list[Frame], class_names: list[str]) -> None:
    root = Path(root)
    for sub in ("frames", "labels"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    cams = {}
    for fr in frames:
        write_rgb(root / "frames" / f"{fr.id}.png", fr.image)
        write_labels(root / "labels" / f"{fr.id}.png", fr.label_map)
        if fr.occluder_mask is not None:
            (root / "masks").mkdir(exist_ok=True)
            write_labels(root / "masks" / f"{fr.id}.png", fr.occluder_mask.astype(np.uint8) * 255)
        if fr.inpainted_image is not None:
            (root / "inpainted").mkdir(exist_ok=True)
            write_rgb(root / "inpainted" / f"{fr.id}.png", fr.inpainted_image)
        cams[fr.id] = fr.camera.to_dict()
    write_json(root / "cameras.json", cams)
    write_json(root / "classes.json", {str(i): n for i, n in enumerate(class_names)})


def load_dataset(root: Path) -> tuple[list[Frame], list[str]]:
    """Read every frame listed in ``cameras.json``; raises DatasetFormatError naming the bad frame."""
    root = Path(root)
    if not (root / "cameras.json").exists():
        raise DatasetFormatError(f"{root}: cameras.json missing")
    class_names = load_classes(root)
    if not (root / "labels").is_dir():
        raise DatasetFormatError(f"{root}: labels directory missing")
    cams = read_json(root / "cameras.json")
    frames = []
    for fid in sorted(cams):
        cam = Camera.from_dict(cams[fid])
        img_path = root / "frames" / f"{fid}.png"
        lab_path = root / "labels" / f"{fid}.png"
        for p in (img_path, lab_path):
            if not p.exists():
                raise DatasetFormatError(f"frame {fid}: {p.relative_to(root)} missing")
        mask = None
        if (root / "masks" / f"{fid}.png").exists():
            mask = read_gray(root / "masks" / f"{fid}.png") != 0
        inp = None
        if (root / "inpainted" / f"{fid}.png").exists():
            inp = read_rgb(root / "inpainted" / f"{fid}.png")
        fr = Frame(fid, read_rgb(img_path), cam, read_gray(lab_path), mask, inp)
        try:
            fr.validate(len(class_names))
        except ValueError as exc:
            raise DatasetFormatError(str(exc)) from None
        frames.append(fr)
    return frames, class_names


def load_enhanced(root: Path, frames: list[Frame], use_inpainted: bool) -> Optional[dict]:
    """Enhanced targets keyed by frame id, or None when no enhancement pass was run.

    Only images enhanced from the same source (raw vs inpainted) that
    supervision will use are returned.
    """
    root = Path(root)
    stats_path = root / "enhanced" / "reference_stats.json"
    if not stats_path.exists():
        return None
    sources = read_json(stats_path).get("sources", {})
    out = {}
    for fr in frames:
        want = "inpainted" if (use_inpainted and fr.inpainted_image is not None) else "raw"
        if sources.get(fr.id) != want:
            continue
        path = root / "enhanced" / f"{fr.id}.png"
        if not path.exists():
            raise DatasetFormatError(f"frame {fr.id}: enhanced/{fr.id}.png missing")
        out[fr.id] = read_rgb(path)
    return out


# ---------------------------------------------------------------- checkpoints

def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def save_checkpoint(path: Path, scene: Scene, config: Optional[dict] = None, extra: Optional[dict] = None) -> None:
    """Binary surfel records plus a JSON sidecar (``<path>.json``)."""
    path = Path(path)
    n, c = len(scene), scene.class_count
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<III", n, c, SH_COEFFS))
        rec = np.concatenate([
            scene.centers, scene.scales, scene.tangent_u, scene.tangent_v, scene.opacity[:, None],
            scene.sh.reshape(n, -1), scene.semantic,
        ], axis=1) if n else np.zeros((0, 12 + 3 * SH_COEFFS + c))
        f.write(np.ascontiguousarray(rec, "<f8").tobytes())
    meta = {"class_names": scene.class_names, "config_hash": config_hash(config or {}),
            "surfel_count": n}
    if config is not None:
        meta["config"] = config
    if extra:
        meta.update(extra)
    write_json(sidecar_path(path), meta)


def sidecar_path(path: Path) -> Path:
    return Path(str(path) + ".json")


def load_checkpoint(path: Path) -> tuple[Scene, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DatasetFormatError(f"{path}: bad checkpoint magic")
    n, c, k = struct.unpack("<III", raw[4:16])
    width = 12 + 3 * k + c
    if len(raw) != 16 + 8 * n * width:
        raise DatasetFormatError(f"{path}: truncated or oversized checkpoint ({len(raw)} bytes)")
    rec = np.frombuffer(raw[16:], "<f8").reshape(n, width).astype(np.float64)
    meta = read_json(sidecar_path(path)) if sidecar_path(path).exists() else {}
    names = meta.get("class_names") or [f"class{i}" for i in range(c)]
    scene = Scene(rec[:, 0:3], rec[:, 3:5], rec[:, 5:8], rec[:, 8:11], rec[:, 11],
                  rec[:, 12:12 + 3 * k].reshape(n, 3, k), rec[:, 12 + 3 * k:], names)
    return scene, meta
