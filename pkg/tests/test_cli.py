import json

import numpy as np
import pytest

from roadsurf.cli import main
from roadsurf.config import load_config
from roadsurf.io import load_checkpoint, load_dataset, read_depth_png, read_json, read_rgb, write_labels
from roadsurf.optimizer import init_scene
from roadsurf.rasterizer import render
from roadsurf.scene import Camera

SPEC = """\
seed: 3
camera: {width: 24, height: 24, fx: 16.0}
trajectory: {start: [0.0, 0.0], end: [1.5, 0.0], count: 4, heldout_every: 2}
bev: {resolution: 0.1, x: [0.5, 2.5], y: [-0.5, 0.5]}
"""

CONFIG = """\
optim:
  iterations: 3
  grid_spacing: 0.25
  grid_halfwidth: 1.0
  grid_margin: 1.0
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out.strip().splitlines()
    return code, [json.loads(line) for line in out]


@pytest.fixture
def files(tmp_path):
    (tmp_path / "spec.yaml").write_text(SPEC)
    (tmp_path / "config.yaml").write_text(CONFIG)
    return tmp_path


@pytest.fixture
def dataset(files, capsys):
    code, _ = run(capsys, "synth", "--spec", files / "spec.yaml", "--out", files / "data")
    assert code == 0
    return files / "data"


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_synth_output_validates(dataset, capsys):
    code, out = run(capsys, "validate", dataset)
    assert code == 0 and out[-1]["ok"] and out[-1]["frames"] == 4 and out[-1]["heldout"] == 2
    for sub in ("frames", "labels", "depth", "gt"):
        assert (dataset / sub).is_dir()
    assert read_json(dataset / "gt" / "bev_meta.json")["width"] == 21


def test_synth_deterministic(files, dataset, capsys):
    run(capsys, "synth", "--spec", files / "spec.yaml", "--out", files / "again")
    assert _tree(dataset) == _tree(files / "again")


def test_synth_bad_spec_names_line(files, capsys):
    (files / "bad.yaml").write_text("seed: 1\nextent:\n  x: [4.0, -2.0]\n")
    code = main(["synth", "--spec", str(files / "bad.yaml"), "--out", str(files / "x")])
    err = capsys.readouterr().err
    assert code == 1
    assert "bad.yaml:3:" in err and "extent.x" in err


def test_validate_failures(dataset, capsys):
    write_labels(dataset / "labels" / "0002.png", np.zeros((5, 5), np.int64))
    code, out = run(capsys, "validate", dataset)
    assert code == 1 and "0002" in out[-1]["error"]
    (dataset / "cameras.json").unlink()
    code, out = run(capsys, "validate", dataset)
    assert code == 1 and "cameras.json" in out[-1]["error"]


def test_enhance_identical_views_is_identity(files, capsys):
    (files / "same.yaml").write_text(SPEC.replace("end: [1.5, 0.0]", "end: [0.0, 0.0]"))
    run(capsys, "synth", "--spec", files / "same.yaml", "--out", files / "same")
    code, out = run(capsys, "enhance", "--dataset", files / "same")
    assert code == 0 and out[-1]["hue_identical"]
    frames, _ = load_dataset(files / "same")
    for fr in frames:
        np.testing.assert_allclose(read_rgb(files / "same" / "enhanced" / f"{fr.id}.png"), fr.image, atol=1 / 255)


def test_enhance_missing_labels(dataset, capsys):
    for p in (dataset / "labels").iterdir():
        p.unlink()
    (dataset / "labels").rmdir()
    code, out = run(capsys, "enhance", "--dataset", dataset)
    assert code == 1 and "labels" in out[-1]["error"]


def test_optimize_zero_iterations_is_init(files, dataset, capsys):
    code, out = run(capsys, "optimize", "--dataset", dataset, "--config", files / "config.yaml",
                    "--iterations", 0, "--out", files / "run")
    assert code == 0 and out[-1]["iteration"] == 0
    scene, meta = load_checkpoint(files / "run" / "checkpoint.srf")
    frames, names = load_dataset(dataset)
    expect = init_scene([f.camera.center for f in frames], load_config(files / "config.yaml").optim, names)
    np.testing.assert_array_equal(scene.centers, expect.centers)
    np.testing.assert_array_equal(scene.opacity, expect.opacity)
    assert meta["iteration"] == 0


def test_optimize_resume_matches_straight_run(files, dataset, capsys):
    cfg = files / "config.yaml"
    run(capsys, "optimize", "--dataset", dataset, "--config", cfg, "--iterations", 4, "--out", files / "full")
    run(capsys, "optimize", "--dataset", dataset, "--config", cfg, "--iterations", 2, "--out", files / "part")
    code, out = run(capsys, "optimize", "--dataset", dataset, "--config", cfg, "--iterations", 2,
                    "--out", files / "part", "--resume", files / "part" / "checkpoint.srf")
    assert code == 0 and out[-1]["iteration"] == 4
    assert (files / "full" / "checkpoint.srf").read_bytes() == (files / "part" / "checkpoint.srf").read_bytes()
    assert (files / "full" / "train_log.jsonl").read_text() == (files / "part" / "train_log.jsonl").read_text()


@pytest.fixture
def trained(files, dataset, capsys):
    code, _ = run(capsys, "optimize", "--dataset", dataset, "--config", files / "config.yaml",
                  "--out", files / "run")
    assert code == 0
    return files / "run" / "checkpoint.srf"


def test_render_matches_in_process(files, dataset, trained, capsys):
    code, _ = run(capsys, "render", "--checkpoint", trained, "--dataset", dataset, "--camera", "0001",
                  "--out", files / "views")
    assert code == 0
    scene, _ = load_checkpoint(trained)
    cam = Camera.from_dict(read_json(dataset / "cameras.json")["0001"])
    ref = render(scene, cam)
    np.testing.assert_array_equal(read_rgb(files / "views" / "0001_color.png"),
                                  np.round(np.clip(ref.color, 0, 1) * 255) / 255)
    depth = read_depth_png(files / "views" / "0001_depth.png")
    covered = ref.alpha > 0
    np.testing.assert_allclose(depth[covered], ref.depth[covered], atol=0.5e-3 + 1e-12)


def test_render_missing_checkpoint(files, dataset, capsys):
    code, out = run(capsys, "render", "--checkpoint", files / "nope.srf", "--dataset", dataset,
                    "--camera", "0001", "--out", files / "v")
    assert code == 1 and "nope.srf" in out[-1]["error"]


def test_export_bev_and_eval(files, dataset, trained, capsys):
    code, out = run(capsys, "export-bev", "--checkpoint", trained, "--bev-resolution", 0.2,
                    "--out", files / "bev")
    assert code == 0
    meta = read_json(files / "bev" / "bev_meta.json")
    scene, _ = load_checkpoint(trained)
    assert meta["resolution"] == 0.2
    assert meta["origin"] == pytest.approx(list(scene.centers[:, :2].min(axis=0)))
    code, out = run(capsys, "eval", files / "bev", files / "bev", "--out", files / "m.json")
    assert code == 0 and out[-1]["psnr_db"] == "inf" and out[-1]["elevation_rmse_m"] == 0.0
    assert read_json(files / "m.json")["psnr_db"] == "inf"
    code, out = run(capsys, "eval", files / "bev", dataset / "gt")
    assert code == 1 and "mismatch" in out[-1]["error"]
    code, out = run(capsys, "export-bev", "--checkpoint", trained, "--match", dataset / "gt" / "bev_meta.json",
                    "--out", files / "bev2")
    code, out = run(capsys, "eval", files / "bev2", dataset / "gt", "--checkpoint", trained, "--dataset", dataset)
    assert code == 0 and out[-1]["cells"] > 0 and out[-1]["heldout_views"] == 2


def test_export_bev_empty_checkpoint(files, capsys):
    from roadsurf.io import save_checkpoint
    from roadsurf.scene import Scene
    save_checkpoint(files / "empty.srf", Scene.empty(["road"]))
    code, out = run(capsys, "export-bev", "--checkpoint", files / "empty.srf", "--out", files / "eb")
    assert code == 0 and out[-1]["covered_cells"] == 0


def test_check_grads_pass_and_injected_fault(capsys):
    code, out = run(capsys, "check-grads", "--scenes", 2, "--surfels", 3)
    assert code == 0 and out[-1]["passed"]
    code, out = run(capsys, "check-grads", "--scenes", 1, "--surfels", 3, "--inject-fault", "opacity")
    assert code == 1 and out[-1]["failing_parameters"] == ["opacity"]


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["optimize", "--iterations", "many"])
    assert exc.value.code == 2


def test_help_lists_ablation_flags(capsys):
    with pytest.raises(SystemExit):
        main(["optimize", "--help"])
    text = capsys.readouterr().out
    for flag in ("--no-enhance", "--no-inpaint", "--no-semantic-loss", "--resume", "--seed", "--config"):
        assert flag in text
