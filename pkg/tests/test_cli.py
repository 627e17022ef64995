import csv
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from mhavio.cli import DEFAULT_TAU, PREDICTION_COLUMNS, VARIANCE_COLUMNS, main
from mhavio.dataset import write_pose_file
from oracles import straight_line


def run(*argv):
    return main([str(a) for a in argv])


def columns(path):
    with open(path) as fh:
        return next(csv.reader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> train -> fit-laplace -> predict (MAP and Bayesian) -> eval, timed."""
    root = tmp_path_factory.mktemp("cli")
    t0 = time.perf_counter()
    codes = [
        run("synth", "--windows", 24, "--path", "arc", "--seed", 3, "--out", root / "data"),
        run("train", "--data", root / "data", "--epochs", 5, "--lr", 1e-3, "--out", root / "train"),
        run("fit-laplace", "--data", root / "data", "--model", root / "train", "--out", root / "post"),
        run("predict", "--data", root / "data", "--model", root / "train", "--out", root / "pred"),
        run("predict", "--data", root / "data", "--model", root / "train", "--posterior", root / "post",
            "--bayesian", "--samples", 5, "--out", root / "bpred"),
        run("eval", "--pred", root / "bpred", "--gt", root / "data", "--out", root / "eval"),
    ]
    return root, codes, time.perf_counter() - t0


def test_end_to_end_under_five_minutes(pipeline):
    root, codes, elapsed = pipeline
    assert codes == [0] * 6
    assert elapsed < 300
    for d in ("data", "train", "post", "pred", "bpred", "eval"):
        cfg = json.loads((root / d / "config.json").read_text())
        assert "seed" in cfg
    assert (root / "eval" / "metrics.json").is_file()
    assert (root / "eval" / "uncertainty_bins.csv").is_file()


def test_bayesian_flag_controls_variance_columns(pipeline):
    root, _, _ = pipeline
    assert columns(root / "pred" / "predictions.csv") == PREDICTION_COLUMNS
    assert columns(root / "bpred" / "predictions.csv") == PREDICTION_COLUMNS + VARIANCE_COLUMNS
    assert "var_x" in columns(root / "bpred" / "trajectory.csv")
    assert "var_x" not in columns(root / "pred" / "trajectory.csv")


def test_default_prior_precision_recorded(pipeline):
    root, _, _ = pipeline
    summary = json.loads((root / "post" / "summary.json").read_text())
    assert summary["tau"] == DEFAULT_TAU
    assert summary["fisher_multiplier"] == summary["num_items"]


def test_synth_twice_identical_and_summary_count(tmp_path, capsys):
    for name in ("a", "b"):
        assert run("synth", "--windows", 12, "--seed", 5, "--out", tmp_path / name) == 0
    a, b = ((tmp_path / n / "manifest.json").read_bytes() for n in "ab")
    assert a == b
    out = capsys.readouterr().out
    manifest = json.loads(a)
    assert f"windows={manifest['num_windows']}" in out and manifest["num_windows"] == 12


def test_global_flags_before_or_after_command(tmp_path):
    assert run("--seed", 5, "--out", tmp_path / "x", "synth", "--windows", 4) == 0
    assert run("synth", "--windows", 4, "--seed", 5, "--out", tmp_path / "y") == 0
    assert (tmp_path / "x" / "manifest.json").read_bytes() == (tmp_path / "y" / "manifest.json").read_bytes()


def test_config_file_and_seed_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 9, "synth": {"num_windows": 6, "noise": 0.1}}))
    assert run("--config", cfg, "synth", "--out", tmp_path / "a") == 0
    resolved = json.loads((tmp_path / "a" / "config.json").read_text())
    assert resolved["seed"] == 9 and resolved["synth"]["num_windows"] == 6
    assert run("--config", cfg, "--seed", 1, "synth", "--out", tmp_path / "b") == 0
    assert json.loads((tmp_path / "b" / "config.json").read_text())["seed"] == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    assert run("--config", bad, "synth", "--out", tmp_path / "c") == 2
    assert not (tmp_path / "c").exists()


def test_ingest_missing_pose_file_exit_1_no_output(tmp_path):
    (tmp_path / "img").mkdir()
    (tmp_path / "imu.csv").write_text("t,ax,ay,az,wx,wy,wz\n")
    code = run("ingest", "--images", tmp_path / "img", "--imu", tmp_path / "imu.csv",
               "--poses", tmp_path / "missing.txt", "--out", tmp_path / "out")
    assert code == 1
    assert not (tmp_path / "out").exists()
    assert [p.name for p in tmp_path.iterdir() if p.name.startswith(".")] == []


def test_degrade_suites(tmp_path):
    assert run("synth", "--windows", 10, "--out", tmp_path / "src") == 0
    src = tmp_path / "src"
    assert run("degrade", "--data", src, "--suite", "nominal", "--out", tmp_path / "nom") == 0
    for f in ("frames.npy", "imu.csv", "poses.txt"):
        assert (tmp_path / "nom" / f).read_bytes() == (src / f).read_bytes()
    assert json.loads((tmp_path / "nom" / "manifest.json").read_text())["suite"] == "nominal"

    assert run("degrade", "--data", src, "--suite", "vision", "--out", tmp_path / "vis") == 0
    assert (tmp_path / "vis" / "imu.csv").read_bytes() == (src / "imu.csv").read_bytes()
    assert (tmp_path / "vis" / "frames.npy").read_bytes() != (src / "frames.npy").read_bytes()

    for name in ("all1", "all2"):
        assert run("degrade", "--data", src, "--suite", "all", "--seed", 7, "--out", tmp_path / name) == 0
    for f in ("frames.npy", "imu.csv", "manifest.json"):
        assert (tmp_path / "all1" / f).read_bytes() == (tmp_path / "all2" / f).read_bytes()

    before = {f.name: f.read_bytes() for f in src.iterdir()}
    assert {f.name: f.read_bytes() for f in src.iterdir()} == before


def test_unknown_suite_exit_2(tmp_path):
    assert run("synth", "--windows", 4, "--out", tmp_path / "src") == 0
    with pytest.raises(SystemExit) as exc:
        run("degrade", "--data", tmp_path / "src", "--suite", "fog")
    assert exc.value.code == 2
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"degrade": {"suite": "fog"}}))
    assert run("--config", cfg, "degrade", "--data", tmp_path / "src", "--out", tmp_path / "d") == 2
    assert not (tmp_path / "d").exists()


def test_eval_identical_pose_files_zero_metrics(tmp_path, capsys):
    poses = straight_line(301, step=1.0)
    poses[:, 1, 3] = 0.01 * np.arange(301) ** 1.5
    write_pose_file(tmp_path / "gt.txt", poses)
    write_pose_file(tmp_path / "pred.txt", poses)
    assert run("eval", "--pred", tmp_path / "pred.txt", "--gt", tmp_path / "gt.txt", "--out", tmp_path / "e") == 0
    metrics = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert metrics["t_rel"] == 0.0 and metrics["r_rel"] == 0.0 and metrics["per_length"]
    assert not (tmp_path / "e" / "uncertainty.json").exists()


def test_eval_length_mismatch_exit_2(tmp_path):
    write_pose_file(tmp_path / "gt.txt", straight_line(10))
    write_pose_file(tmp_path / "pred.txt", straight_line(11))
    assert run("eval", "--pred", tmp_path / "pred.txt", "--gt", tmp_path / "gt.txt", "--out", tmp_path / "e") == 2


def test_report_renders_figures(pipeline, tmp_path):
    root, _, _ = pipeline
    write_pose_file(tmp_path / "gt.txt", straight_line(201))
    write_pose_file(tmp_path / "pred.txt", straight_line(201, scale=1.02))
    assert run("eval", "--pred", tmp_path / "pred.txt", "--gt", tmp_path / "gt.txt", "--out", tmp_path / "e") == 0
    assert run("report", "--eval", tmp_path / "e", "--train", root / "train", "--out", tmp_path / "r") == 0
    names = {p.name for p in (tmp_path / "r").iterdir()}
    assert {"errors_per_length.png", "trajectory.png", "loss_curve.png", "metrics.csv"} <= names
    assert (tmp_path / "r" / "trajectory.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert run("report", "--eval", root / "eval", "--out", tmp_path / "r2") == 0
    assert (tmp_path / "r2" / "uncertainty_boxes.png").is_file()


def test_bayesian_without_posterior_exit_2(pipeline, tmp_path):
    root, _, _ = pipeline
    assert run("predict", "--data", root / "data", "--model", root / "train", "--bayesian",
               "--out", tmp_path / "p") == 2


def test_installed_entry_point():
    out = subprocess.run([sys.executable, "-m", "mhavio.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("synth", "ingest", "degrade", "train", "fit-laplace", "predict", "eval", "report"):
        assert cmd in out.stdout
