"""Command-line entry point: ``roadsurf <verb> [flags]``.

Machine-readable results go to stdout as JSON lines; progress goes to stderr.
Exit codes: 0 success, 1 validation or check failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import re
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .bev import BEVGrid, compare_bev, export_bev, load_bev, palette_for, psnr, save_bev
from .config import ConfigError, PipelineConfig, load_config, with_overrides
from .enhancement import compute_reference_stats, enhance_hsv, enhance_frame, rgb_to_hsv
from .gradients import PARAM_CLASSES, backward, finite_diff_check, random_check_case
from .io import (
    DatasetFormatError,
    load_checkpoint,
    load_dataset,
    load_enhanced,
    read_json,
    read_rgb,
    save_checkpoint,
    save_dataset,
    write_depth_png,
    write_json,
    write_labels,
    write_pfm,
    write_rgb,
)
from .occlusion import DatasetError, OcclusionConfig, frame_occluder_mask
from .optimizer import AdamState, init_scene, optimize
from .rasterizer import render
from .scene import Camera
from .synthdata import CLASS_NAMES, SpecError, build_dataset, gt_bev

logger = logging.getLogger("roadsurf")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
CHECKPOINT_NAME = "checkpoint.srf"
ADAM_NAME = "adam_state.npz"
LOG_NAME = "train_log.jsonl"


class CommandError(Exception):
    """Validation failure reported with exit code 1."""


def emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True, default=_json_default) + "\n")
    sys.stdout.flush()


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _finite(x):
    """JSON has no infinity; encode it as the string "inf"."""
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    if isinstance(x, dict):
        return {k: _finite(v) for k, v in x.items()}
    return x


def _config(args) -> PipelineConfig:
    cfg = load_config(getattr(args, "config", None))
    return with_overrides(
        cfg,
        seed=getattr(args, "seed", None),
        iterations=getattr(args, "iterations", None),
        no_enhance=getattr(args, "no_enhance", False),
        no_inpaint=getattr(args, "no_inpaint", False),
        no_semantic_loss=getattr(args, "no_semantic_loss", False),
        bev_resolution=getattr(args, "bev_resolution", None),
        out=getattr(args, "out", None),
        dataset=getattr(args, "dataset", None),
    )


def _occlusion(cfg: PipelineConfig) -> OcclusionConfig:
    o = cfg.occlusion
    return OcclusionConfig(o.use_inpainted, cfg.enhance.enabled, tuple(o.occluder_classes),
                           tuple(o.non_ground_classes), o.dilation_radius)


def _split(root: Path, frame_ids: list[str]) -> tuple[list[str], list[str]]:
    path = root / "split.json"
    if not path.exists():
        return list(frame_ids), []
    split = read_json(path)
    held = [f for f in split.get("heldout", []) if f in frame_ids]
    return [f for f in frame_ids if f not in held], held


# ---------------------------------------------------------------- synth

def _spec_line(text: str, path: str) -> Optional[int]:
    """1-based line of a dotted key path such as ``texture.stripes[0].width`` in YAML text."""
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return None
    line = None
    for part in re.findall(r"[^.\[\]]+|\[\d+\]", path):
        if node is None:
            return line
        if part.startswith("["):
            idx = int(part[1:-1])
            if not isinstance(node, yaml.SequenceNode) or idx >= len(node.value):
                return line
            node = node.value[idx]
            line = node.start_mark.line + 1
        else:
            if not isinstance(node, yaml.MappingNode):
                return line
            found = None
            for k, v in node.value:
                if k.value == part:
                    found = (k, v)
                    break
            if found is None:
                return line
            line = found[0].start_mark.line + 1
            node = found[1]
    return line


def cmd_synth(args) -> int:
    text = Path(args.spec).read_text() if args.spec else ""
    try:
        raw = yaml.safe_load(text) if text else {}
    except yaml.YAMLError as exc:
        raise CommandError(f"{args.spec}: {exc}") from None
    raw = raw or {}
    if args.seed is not None:
        raw["seed"] = int(args.seed)
    try:
        ds = build_dataset(raw)
    except SpecError as exc:
        msg = str(exc)
        line = _spec_line(text, msg.split(" ", 1)[0]) if text else None
        where = f"{args.spec}:{line}: " if line else (f"{args.spec}: " if args.spec else "")
        raise CommandError(f"{where}{msg}") from None
    root = Path(args.out)
    save_dataset(root, ds.frames, CLASS_NAMES)
    (root / "depth").mkdir(exist_ok=True)
    for fr in ds.frames:
        write_depth_png(root / "depth" / f"{fr.id}.png", np.where(np.isfinite(fr.depth), fr.depth, 0.0))
    write_json(root / "split.json", {"train": [f.id for f in ds.train_frames], "heldout": ds.heldout})
    write_json(root / "spec.json", ds.spec)
    if ds.lighting:
        write_json(root / "lighting.json", ds.lighting)
    b = ds.spec["bev"]
    grid = BEVGrid.covering(b["x"], b["y"], b["resolution"])
    gt = gt_bev(ds.scene, grid)
    gt_dir = root / "gt"
    gt_dir.mkdir(exist_ok=True)
    write_rgb(gt_dir / "bev_rgb.png", gt["rgb"])
    write_labels(gt_dir / "bev_semantic.png", gt["semantic"], palette_for(CLASS_NAMES))
    write_pfm(gt_dir / "bev_elevation.pfm", gt["elevation"])
    write_pfm(gt_dir / "bev_coverage.pfm", np.ones_like(gt["elevation"]))
    meta = grid.to_dict()
    meta.update(coverage_threshold=0.5, class_names=CLASS_NAMES)
    write_json(gt_dir / "bev_meta.json", meta)
    emit({"command": "synth", "out": str(root), "frames": len(ds.frames), "heldout": ds.heldout})
    return EXIT_OK


# ---------------------------------------------------------------- validate

def cmd_validate(args) -> int:
    frames, names = load_dataset(Path(args.dataset))
    split_train, held = _split(Path(args.dataset), [f.id for f in frames])
    emit({"command": "validate", "dataset": str(args.dataset), "frames": len(frames),
          "classes": names, "train": len(split_train), "heldout": len(held), "ok": True})
    return EXIT_OK


# ---------------------------------------------------------------- enhance

def _road_v_std(images: list[np.ndarray], frames, road: int) -> float:
    means = []
    for img, fr in zip(images, frames):
        sel = fr.label_map == road
        if sel.any():
            means.append(float(rgb_to_hsv(img)[..., 2][sel].mean()))
    return float(np.std(means)) if means else 0.0


def cmd_enhance(args) -> int:
    cfg = _config(args)
    root = Path(cfg.dataset)
    frames, names = load_dataset(root)
    cfg.validate(names)
    occ = _occlusion(cfg)
    classes = [names.index(c) for c in cfg.enhance.classes]
    sources, views, bases = {}, [], []
    for fr in frames:
        inpainted = occ.use_inpainted and fr.inpainted_image is not None
        base = fr.inpainted_image if inpainted else fr.image
        valid = None if inpainted else ~frame_occluder_mask(fr, names, occ).mask
        sources[fr.id] = "inpainted" if inpainted else "raw"
        views.append((base, fr.label_map, valid))
        bases.append(base)
    train_ids, _ = _split(root, [f.id for f in frames])
    ref_views = [v for v, fr in zip(views, frames) if fr.id in train_ids]
    reference = compute_reference_stats(ref_views, classes)
    out_dir = root / "enhanced"
    out_dir.mkdir(exist_ok=True)
    hue_identical = True
    enhanced = []
    for fr, (base, labels, valid) in zip(frames, views):
        before, after = enhance_hsv(base, labels, reference, classes, valid)
        hue_identical &= bool(np.array_equal(before[..., 0], after[..., 0]))
        img = enhance_frame(base, labels, reference, classes, valid)
        write_rgb(out_dir / f"{fr.id}.png", img)
        enhanced.append(read_rgb(out_dir / f"{fr.id}.png"))
        print(f"enhanced {fr.id}", file=sys.stderr)
    road = names.index("road") if "road" in names else None
    report = {"command": "enhance", "frames": len(frames), "hue_identical": hue_identical,
              "classes": list(cfg.enhance.classes)}
    if road is not None:
        report["road_v_std_before"] = _road_v_std(bases, frames, road)
        report["road_v_std_after"] = _road_v_std(enhanced, frames, road)
    write_json(out_dir / "reference_stats.json", {
        "sources": sources,
        "reference": {names[c]: s.to_dict() for c, s in reference.items()},
        "report": report,
    })
    emit(report)
    return EXIT_OK


# ---------------------------------------------------------------- optimize

def _load_training(cfg: PipelineConfig):
    root = Path(cfg.dataset)
    frames, names = load_dataset(root)
    cfg.validate(names)
    train_ids, held = _split(root, [f.id for f in frames])
    train = [f for f in frames if f.id in train_ids]
    if not train:
        raise CommandError("dataset has no training frames")
    enhanced = load_enhanced(root, train, cfg.occlusion.use_inpainted) if cfg.enhance.enabled else None
    return frames, train, held, names, enhanced


def cmd_optimize(args) -> int:
    cfg = _config(args)
    frames, train, _, names, enhanced = _load_training(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    start, state = 0, None
    if args.resume:
        scene, meta = load_checkpoint(Path(args.resume))
        start = int(meta.get("iteration", 0))
        adam = Path(args.resume).with_name(ADAM_NAME)
        if adam.exists():
            with np.load(adam) as z:
                state = AdamState.from_arrays(dict(z))
    else:
        scene = init_scene([f.camera.center for f in frames], cfg.optim, names)
    occ = _occlusion(cfg)
    log_path = out / LOG_NAME
    mode = "a" if args.resume else "w"
    t0 = time.time()
    with open(log_path, mode) as logf:
        def on_iter(entry):
            line = json.dumps(entry, sort_keys=True)
            logf.write(line + "\n")
            sys.stdout.write(line + "\n")
            if entry["iteration"] % 50 == 0:
                print(f"iter {entry['iteration']} loss {entry['total']:.5f} "
                      f"surfels {entry['surfels']} {time.time() - t0:.0f}s", file=sys.stderr)

        res = optimize(scene, train, cfg.optim, cfg.loss, occ, enhanced, state, start, on_iter)
    ckpt = out / CHECKPOINT_NAME
    save_checkpoint(ckpt, res.scene, cfg.to_dict(), {"iteration": res.iteration})
    np.savez(out / ADAM_NAME, **res.state.to_arrays())
    emit({"command": "optimize", "checkpoint": str(ckpt), "iteration": res.iteration,
          "surfels": len(res.scene), "final_loss": res.log[-1]["total"] if res.log else None})
    return EXIT_OK


# ---------------------------------------------------------------- render

def cmd_render(args) -> int:
    scene, _ = load_checkpoint(Path(args.checkpoint))
    if args.pose:
        cam = Camera.from_dict(read_json(Path(args.pose)))
        name = Path(args.pose).stem
    else:
        if not args.dataset or args.camera is None:
            raise CommandError("render needs --pose or --dataset with --camera")
        cams = read_json(Path(args.dataset) / "cameras.json")
        if args.camera not in cams:
            raise CommandError(f"camera {args.camera!r} not in cameras.json")
        cam = Camera.from_dict(cams[args.camera])
        name = args.camera
    out = render(scene, cam)
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    write_rgb(d / f"{name}_color.png", out.color)
    write_depth_png(d / f"{name}_depth.png", np.where(out.alpha > 0, out.depth, 0.0))
    write_rgb(d / f"{name}_normal.png", 0.5 * (out.normal + 1.0))
    sem = out.semantic.argmax(axis=-1) if scene.class_count else np.zeros(out.depth.shape, int)
    write_labels(d / f"{name}_semantic.png", sem, palette_for(scene.class_names))
    emit({"command": "render", "camera": name, "out": str(d)})
    return EXIT_OK


# ---------------------------------------------------------------- export-bev

def cmd_export_bev(args) -> int:
    cfg = _config(args)
    scene, _ = load_checkpoint(Path(args.checkpoint))
    if args.match:
        grid = BEVGrid.from_dict(read_json(Path(args.match)))
        if args.bev_resolution is not None and grid.resolution != cfg.bev.resolution:
            raise CommandError("--bev-resolution conflicts with --match grid")
    elif cfg.bev.x is not None and cfg.bev.y is not None:
        grid = BEVGrid.covering(cfg.bev.x, cfg.bev.y, cfg.bev.resolution)
    else:
        grid = BEVGrid.for_scene(scene, cfg.bev.resolution)
    bev = export_bev(scene, grid, coverage_threshold=cfg.bev.coverage_threshold)
    save_bev(Path(cfg.out), bev, scene.class_names)
    emit({"command": "export-bev", "out": cfg.out, "grid": grid.to_dict(),
          "covered_cells": int(bev.covered.sum())})
    return EXIT_OK


# ---------------------------------------------------------------- eval

def heldout_psnr(scene, frames, names) -> dict:
    """Mean PSNR over held-out views, full frame and road-class pixels."""
    full, road = [], []
    road_ids = [names.index(c) for c in ("road", "lane_marking") if c in names]
    for fr in frames:
        ref = fr.inpainted_image if fr.inpainted_image is not None else fr.image
        out = render(scene, fr.camera)
        full.append(psnr(out.color, ref))
        sel = np.isin(fr.label_map, road_ids)
        if fr.occluder_mask is not None and fr.inpainted_image is None:
            sel &= ~fr.occluder_mask
        if sel.any():
            road.append(psnr(out.color, ref, sel))
    return {"heldout_psnr_full_db": float(np.mean(full)) if full else None,
            "heldout_psnr_road_db": float(np.mean(road)) if road else None,
            "heldout_views": len(full)}


def cmd_eval(args) -> int:
    pred, pred_names = load_bev(Path(args.pred))
    gt, gt_names = load_bev(Path(args.gt))
    names = pred_names or gt_names
    try:
        report = compare_bev(pred, gt, names)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    if args.checkpoint and args.dataset:
        scene, _ = load_checkpoint(Path(args.checkpoint))
        frames, dnames = load_dataset(Path(args.dataset))
        _, held = _split(Path(args.dataset), [f.id for f in frames])
        report.update(heldout_psnr(scene, [f for f in frames if f.id in held], dnames))
    report = _finite(report)
    if args.out:
        write_json(Path(args.out), report)
    emit({"command": "eval", **report})
    return EXIT_OK


# ---------------------------------------------------------------- check-grads

def cmd_check_grads(args) -> int:
    cfg = _config(args)
    worst = {k: 0.0 for k in PARAM_CLASSES}
    failures = []
    t0 = time.time()
    for k in range(args.scenes):
        scene, frame, sup = random_check_case(cfg.seed + k, n_surfels=args.surfels)
        out = render(scene, frame.camera)
        _, analytic = backward(scene, frame, out, cfg.loss, sup, 1e-8)
        if args.inject_fault:
            getattr(analytic, args.inject_fault)[...] *= -1.0
        rep = finite_diff_check(scene, frame, cfg.loss, supervision=sup, analytic=analytic)
        for cls, err in rep.max_rel_error.items():
            worst[cls] = max(worst[cls], err)
        if not rep.passed:
            failures.append({"scene": k, "parameters": rep.failing()})
        print(f"scene {k}: {'ok' if rep.passed else 'FAIL ' + ','.join(rep.failing())} "
              f"({time.time() - t0:.1f}s)", file=sys.stderr)
    failing = sorted({p for f in failures for p in f["parameters"]})
    emit({"command": "check-grads", "passed": not failures, "max_rel_error": worst,
          "failing_parameters": failing, "scenes": args.scenes})
    return EXIT_OK if not failures else EXIT_FAIL


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="roadsurf", description="Road-surface reconstruction with planar Gaussian surfels.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--workers", type=int, default=None, help="number of numba worker threads")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, dataset=True, config=True):
        if config:
            sp.add_argument("--config", type=Path, help="YAML pipeline config; flags override it")
            sp.add_argument("--seed", type=int, help="master seed")
        if dataset:
            sp.add_argument("--dataset", help="dataset directory")
        return sp

    sp = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    sp.add_argument("--spec", help="YAML scene spec (defaults apply to missing keys)")
    sp.add_argument("--seed", type=int, help="override the seed in the scene file")
    sp.add_argument("--out", required=True, help="dataset output directory")
    sp.set_defaults(func=cmd_synth)

    sp = common(sub.add_parser("enhance", help="semantic-aware HSV color enhancement"))
    sp.add_argument("--no-inpaint", action="store_true", help="enhance raw images even when inpainted ones exist")
    sp.set_defaults(func=cmd_enhance)

    sp = common(sub.add_parser("optimize", help="optimize surfels against the dataset"))
    sp.add_argument("--iterations", type=int, help="optimization steps")
    sp.add_argument("--no-enhance", action="store_true", help="ignore enhanced targets")
    sp.add_argument("--no-inpaint", action="store_true", help="supervise on raw images with occluders masked")
    sp.add_argument("--no-semantic-loss", action="store_true", help="set the semantic weight to zero")
    sp.add_argument("--out", help="output directory for checkpoint and log")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_optimize)

    sp = sub.add_parser("render", help="render a perspective view from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", help="dataset whose cameras.json holds --camera")
    sp.add_argument("--camera", help="camera id in cameras.json")
    sp.add_argument("--pose", help="JSON file with one camera (cameras.json entry format)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_render)

    sp = common(sub.add_parser("export-bev", help="export BEV RGB, semantic and elevation maps"), dataset=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--bev-resolution", type=float, help="meters per BEV cell")
    sp.add_argument("--match", help="bev_meta.json whose grid to reuse")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export_bev)

    sp = sub.add_parser("eval", help="compare BEV directories and report metrics")
    sp.add_argument("pred", help="predicted BEV directory")
    sp.add_argument("gt", help="ground-truth BEV directory")
    sp.add_argument("--checkpoint", help="also report held-out view PSNR for this checkpoint")
    sp.add_argument("--dataset", help="dataset providing held-out views")
    sp.add_argument("--out", help="write the report JSON here")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("check-grads", help="finite-difference gradient check on random scenes"),
                dataset=False)
    sp.add_argument("--scenes", type=int, default=20)
    sp.add_argument("--surfels", type=int, default=8)
    sp.add_argument("--inject-fault", choices=PARAM_CLASSES, help="flip the sign of one analytic gradient")
    sp.set_defaults(func=cmd_check_grads)

    sp = sub.add_parser("validate", help="check a dataset directory")
    sp.add_argument("dataset")
    sp.set_defaults(func=cmd_validate)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers is not None:
        import numba

        if args.workers < 1:
            parser.error("--workers must be at least 1")
        numba.set_num_threads(min(args.workers, numba.config.NUMBA_NUM_THREADS))
    try:
        return args.func(args)
    except (CommandError, ConfigError, DatasetFormatError, DatasetError, SpecError,
            FileNotFoundError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        emit({"command": args.verb, "error": str(exc)})
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
