"""CLI contract: subcommands, exit codes, error lines, artifacts."""

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from stitch4d import images as im
from stitch4d.cli import dispatch
from stitch4d.data import Dataset, DatasetManifest
from stitch4d.scene import load_scene

MICRO_SPEC = {
    "seed": 3, "n_static": 6, "n_dynamic": 1, "extent": 5.0,
    "surface_step": 1.25, "fps": 5, "view_res": 12, "pano_height": 24,
}


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """gen -> bridge -> train, once per module."""
    root = tmp_path_factory.mktemp("cli_ws")
    spec_path = root / "spec.json"
    spec_path.write_text(json.dumps(MICRO_SPEC))
    ds_dir = root / "ds"
    assert dispatch(["gen", "--spec", str(spec_path), "--out", str(ds_dir)]) == 0
    assert dispatch(["bridge", "--data", str(ds_dir), "--k", "2"]) == 0

    train_cfg = {
        "data": "ds",
        "seed": 0,
        "optim": {"iterations": 25, "batch": 2, "probe_interval": 10,
                  "prune_interval": 0},
        "init": {"stride": 6},
        "include_bridge": True,
        "probe_sample": 0,
    }
    cfg_path = root / "train.json"
    cfg_path.write_text(json.dumps(train_cfg))
    run_dir = root / "run"
    assert dispatch(["train", "--config", str(cfg_path), "--out", str(run_dir),
                     "--threads", "2"]) == 0
    return {"root": root, "ds": ds_dir, "run": run_dir, "cfg": cfg_path}


# ---------------------------------------------------------------------------
# Parser-level behavior
# ---------------------------------------------------------------------------

def test_help_exits_zero(capsys):
    assert dispatch(["--help"]) == 0
    assert "subcommand" in capsys.readouterr().out


def test_subcommand_help_exits_zero(capsys):
    assert dispatch(["train", "--help"]) == 0
    out = capsys.readouterr().out
    assert "--config" in out and "--threads" in out


def test_unknown_subcommand_exits_one():
    assert dispatch(["transmogrify"]) == 1


def test_missing_required_argument_exits_one():
    assert dispatch(["gen"]) == 1


def test_module_error_line_format(capsys, tmp_path):
    code = dispatch(["eval", "--scene", str(tmp_path / "missing.stz"),
                     "--data", str(tmp_path), "--out", str(tmp_path / "m.csv")])
    assert code == 1
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert err.startswith("error: eval: ")


def test_invalid_thread_count_reports_error(capsys, monkeypatch):
    monkeypatch.setenv("STITCH4D_THREADS", "0")
    code = dispatch(["gradcheck", "--n-gaussians", "2", "--resolution", "8"])
    assert code == 1
    err = capsys.readouterr().err
    assert err.startswith("error: gradcheck: ") and ">= 1" in err


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def test_gradcheck_line_and_exit(capsys):
    code = dispatch(["gradcheck", "--seed", "0", "--n-gaussians", "4",
                     "--resolution", "12"])
    out = capsys.readouterr().out.strip()
    fields = out.split()
    assert fields[0] == "gradcheck:" and fields[2] == "failures"
    failures, total = int(fields[1]), int(fields[4])
    assert total == 4 * 28
    assert code == (0 if 1.0 - failures / total >= 0.99 else 1)
    assert code == 0


# ---------------------------------------------------------------------------
# gen / bridge artifacts
# ---------------------------------------------------------------------------

def test_gen_artifacts(cli_workspace):
    ds = Dataset.open(cli_workspace["ds"])
    assert len(ds.manifest.samples) == 2 * 120 * 5
    assert len(ds.manifest.trajectory) == 11 * 5
    teacher = load_scene(cli_workspace["ds"] / "teacher.stz")
    assert teacher.n > 0


def test_gen_rejects_unknown_spec_field(tmp_path, capsys):
    bad = tmp_path / "spec.json"
    bad.write_text(json.dumps({"seed": 0, "warp": 9}))
    assert dispatch(["gen", "--spec", str(bad), "--out", str(tmp_path / "d")]) == 1
    assert "unknown world-spec fields" in capsys.readouterr().err


def test_bridge_artifacts(cli_workspace):
    ds = Dataset.open(cli_workspace["ds"])
    assert ds.manifest.bridge["k"] == 2
    assert len(ds.manifest.bridge_samples) == 2 * 5 * 6
    assert (cli_workspace["ds"] / "bridge" / "poses.json").is_file()


def test_bridge_requires_two_locations(tmp_path, capsys):
    DatasetManifest(
        locations=[np.zeros(3)], t_values=[0.0], view_res=4, pano_height=8,
        face_res=4, world={},
    ).save(tmp_path)
    assert dispatch(["bridge", "--data", str(tmp_path)]) == 1
    assert "two capture locations" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train artifacts
# ---------------------------------------------------------------------------

def test_train_artifacts(cli_workspace):
    run = cli_workspace["run"]
    assert (run / "final.stz").is_file()
    scene = load_scene(run / "final.stz")
    assert scene.n > 0
    with open(run / "log.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 25
    assert list(rows[0]) == ["iteration", "loss", "recon", "cross",
                             "probe_psnr", "n_gaussians"]


def test_train_echoes_resolved_config(cli_workspace):
    resolved = json.loads((cli_workspace["run"] / "train_config.json").read_text())
    assert resolved["optim"]["iterations"] == 25
    assert resolved["include_bridge"] is True
    assert resolved["init"] == {"stride": 6}
    # tau from capture geometry: locations 10 m apart -> 0.1 * 10
    assert resolved["loss"]["tau"] == pytest.approx(1.0)
    assert resolved["seed"] == 0


def test_train_missing_probe_sample(cli_workspace, tmp_path, capsys):
    cfg = json.loads(cli_workspace["cfg"].read_text())
    cfg["data"] = str(cli_workspace["ds"])
    cfg["probe_sample"] = 10**6
    bad = tmp_path / "train.json"
    bad.write_text(json.dumps(cfg))
    assert dispatch(["train", "--config", str(bad), "--out", str(tmp_path / "r")]) == 1
    assert "probe_sample" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# render / eval
# ---------------------------------------------------------------------------

def test_render_poses_dict(cli_workspace, tmp_path):
    poses = {"height": 24, "poses": [
        {"position": [0.0, 0.5, 0.0], "t": 0.0},
        {"position": [1.0, 0.5, 0.0]},          # t defaults to 0
    ]}
    ppath = tmp_path / "poses.json"
    ppath.write_text(json.dumps(poses))
    out = tmp_path / "frames"
    assert dispatch(["render", "--scene", str(cli_workspace["ds"] / "teacher.stz"),
                     "--poses", str(ppath), "--out", str(out)]) == 0
    f0 = im.read_png(out / "f0000.png")
    assert f0.shape == (24, 48, 3)
    assert (out / "f0001.png").is_file()
    # idempotent: re-render is byte-identical
    before = (out / "f0000.png").read_bytes()
    assert dispatch(["render", "--scene", str(cli_workspace["ds"] / "teacher.stz"),
                     "--poses", str(ppath), "--out", str(out)]) == 0
    assert (out / "f0000.png").read_bytes() == before


def test_render_bare_pose_list(cli_workspace, tmp_path):
    ppath = tmp_path / "poses.json"
    ppath.write_text(json.dumps([{"position": [0.0, 0.5, 0.0], "t": 0.2}]))
    out = tmp_path / "frames"
    assert dispatch(["render", "--scene", str(cli_workspace["ds"] / "teacher.stz"),
                     "--poses", str(ppath), "--out", str(out)]) == 0
    assert im.read_png(out / "f0000.png").shape == (128, 256, 3)  # default height


def test_render_empty_pose_list(cli_workspace, tmp_path, capsys):
    ppath = tmp_path / "poses.json"
    ppath.write_text("[]")
    assert dispatch(["render", "--scene", str(cli_workspace["ds"] / "teacher.stz"),
                     "--poses", str(ppath), "--out", str(tmp_path / "f")]) == 1
    assert "pose list is empty" in capsys.readouterr().err


def test_eval_teacher_scores_cap(cli_workspace, tmp_path, capsys):
    out_csv = tmp_path / "metrics.csv"
    code = dispatch(["eval", "--scene", str(cli_workspace["ds"] / "teacher.stz"),
                     "--data", str(cli_workspace["ds"]), "--out", str(out_csv)])
    assert code == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("eval:")]
    assert len(lines) == 2
    with open(out_csv) as f:
        rows = list(csv.DictReader(f))
    by_cond = {r["condition"]: r for r in rows}
    assert float(by_cond["trajectory_interpolation"]["psnr_db"]) == 99.0
    assert float(by_cond["seen_viewpoints"]["ssim"]) == 1.0
    assert int(by_cond["trajectory_interpolation"]["n_samples"]) == 55
    assert int(by_cond["seen_viewpoints"]["n_samples"]) == 240


def test_eval_temporal_setting(cli_workspace, tmp_path):
    out_csv = tmp_path / "metrics.csv"
    code = dispatch(["eval", "--scene", str(cli_workspace["ds"] / "teacher.stz"),
                     "--data", str(cli_workspace["ds"]), "--out", str(out_csv),
                     "--setting", "temporal"])
    assert code == 0
    with open(out_csv) as f:
        rows = list(csv.DictReader(f))
    assert {r["setting"] for r in rows} == {"temporal"}


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------

def test_installed_script_and_module_entry():
    for cmd in (["stitch4d", "--help"],
                [sys.executable, "-m", "stitch4d.cli", "--help"]):
        proc = subprocess.run(cmd, capture_output=True, text=True)
        assert proc.returncode == 0
        assert "subcommand" in proc.stdout


def test_unknown_subcommand_exits_one_in_subprocess():
    proc = subprocess.run(["stitch4d", "nope"], capture_output=True, text=True)
    assert proc.returncode == 1
    assert "usage:" in proc.stderr
