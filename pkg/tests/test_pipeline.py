import filecmp
import os
import shutil
import subprocess
import sys

import pytest

from dynslam import dataio, pipeline
from dynslam import geometry as g
from dynslam.cli import main
from dynslam.errors import FrameMismatch
from dynslam.metrics import parse_summary

SPEC = """\
Scene.Frames: 8
Scene.Seed: 3
Camera.width: 320
Camera.height: 240
Camera.fx: 250.0
Camera.fy: 250.0
Camera.cx: 160.0
Camera.cy: 120.0
Camera.baseline: 0.5
Landmarks.Count: 150
Depth.Mode: raw
Objects: default
"""

EXPORTS = ["camera_trajectory.txt", "object_trajectory.txt", "object_motions.txt", "sparse_map.txt",
           "object_speed_points.txt", "object_bboxes.csv", "labels.txt", "metrics.csv", "summary.txt"]


def cli(*args):
    return subprocess.run([sys.executable, "-m", "dynslam", *args], capture_output=True, text=True)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    (root / "spec.txt").write_text(SPEC)
    r = cli("synth-gen", "--spec", str(root / "spec.txt"), "--out", str(root / "seq"))
    assert r.returncode == 0, r.stderr
    r = cli("run", "--sequence", str(root / "seq"), "--settings", str(root / "seq" / "settings.txt"),
            "--out", str(root / "run"), "--window", "4", "--dump-graph")
    assert r.returncode == 0, r.stderr
    root.joinpath("run_stdout.txt").write_text(r.stdout)
    return root


def test_run_writes_every_export(workdir):
    for name in EXPORTS + [pipeline.GRAPH_FILE]:
        assert (workdir / "run" / name).is_file(), name
    s = parse_summary(workdir / "run" / "summary.txt")
    assert s["camera_rmse_t"] < 1e-4 and s["camera_rmse_r"] < 1e-4
    assert s["object_rmse_t"] < 1e-4
    assert s["camera_frames"] == 8


def test_console_has_one_line_per_frame(workdir):
    lines = [ln for ln in (workdir / "run_stdout.txt").read_text().splitlines() if ln.startswith("frame ")]
    assert [int(ln.split()[1]) for ln in lines] == list(range(8))
    assert "speeds 1:" in lines[-1]


def test_no_global_still_exports(workdir, tmp_path):
    out = tmp_path / "run"
    rc = main(["run", "--sequence", str(workdir / "seq"), "--settings", str(workdir / "seq" / "settings.txt"),
               "--out", str(out), "--no-global", "--quiet", "--dump-graph"])
    assert rc == 0
    for name in EXPORTS:
        assert (out / name).is_file(), name
    assert not (out / pipeline.GRAPH_FILE).exists()


def test_same_seed_gives_byte_identical_exports(workdir, tmp_path):
    out = tmp_path / "again"
    rc = main(["run", "--sequence", str(workdir / "seq"), "--settings", str(workdir / "seq" / "settings.txt"),
               "--out", str(out), "--window", "4", "--quiet"])
    assert rc == 0
    match, mismatch, errors = filecmp.cmpfiles(workdir / "run", out, EXPORTS, shallow=False)
    assert mismatch == [] and errors == []


def test_missing_flow_names_the_frame(workdir, tmp_path):
    seq = tmp_path / "seq"
    shutil.copytree(workdir / "seq", seq)
    os.remove(seq / "flow" / "000004.flo")
    r = cli("run", "--sequence", str(seq), "--settings", str(seq / "settings.txt"), "--out", str(tmp_path / "o"))
    assert r.returncode != 0
    assert r.stderr.startswith("dataio: MissingFlow:")
    assert "frame 4" in r.stderr


def test_synth_gen_rejects_zero_frames(tmp_path):
    spec = tmp_path / "spec.txt"
    spec.write_text(SPEC.replace("Scene.Frames: 8", "Scene.Frames: 0"))
    r = cli("synth-gen", "--spec", str(spec), "--out", str(tmp_path / "seq"))
    assert r.returncode != 0
    assert r.stderr.startswith("synth: DegenerateSpec:")


def test_synth_gen_is_deterministic(workdir, tmp_path):
    assert main(["synth-gen", "--spec", str(workdir / "spec.txt"), "--out", str(tmp_path / "seq")]) == 0
    cmp = filecmp.dircmp(workdir / "seq", tmp_path / "seq")
    stack = [cmp]
    while stack:
        c = stack.pop()
        assert c.left_only == [] and c.right_only == []
        _, mismatch, errors = filecmp.cmpfiles(c.left, c.right, c.common_files, shallow=False)
        assert mismatch == [] and errors == []
        stack.extend(c.subdirs.values())


def gt_run_dir(seq, out):
    """A run directory whose estimates are the ground truth."""
    settings = dataio.load_settings(seq / "settings.txt")
    bundles = dataio.load_sequence(seq, settings)
    os.makedirs(out)
    dataio.write_poses([(b.index, b.gt_camera) for b in bundles], out / "camera_trajectory.txt")
    rows = []
    for prev, b in zip(bundles, bundles[1:]):
        for oid in sorted(b.gt_objects):
            rows.append((b.index, oid, g.compose(b.gt_objects[oid], g.inverse(prev.gt_objects[oid]))))
    dataio.write_poses(rows, out / "object_motions.txt")
    return len(bundles), len(rows)


def test_evaluate_ground_truth_against_itself(workdir, tmp_path):
    n, m = gt_run_dir(workdir / "seq", tmp_path / "est")
    reports, agg = pipeline.evaluate(tmp_path / "est", workdir / "seq", tmp_path / "ev")
    assert agg["camera_rmse_t"] == 0.0 and agg["object_rmse_t"] == 0.0
    assert agg["camera_rmse_r"] < 1e-7 and agg["object_rmse_r"] < 1e-7
    assert agg["camera_frames"] == n and agg["object_entries"] == m


def test_five_identical_runs_aggregate_to_the_single_run(workdir, tmp_path):
    for i in range(5):
        shutil.copytree(workdir / "run", tmp_path / "runs" / f"r{i}")
    _, single = pipeline.evaluate(workdir / "run", workdir / "seq", tmp_path / "one")
    reports, agg = pipeline.evaluate(tmp_path / "runs", workdir / "seq", tmp_path / "five")
    assert len(reports) == 5
    assert agg == single
    s = parse_summary(tmp_path / "five" / "summary.txt")
    assert s["runs"] == 5
    assert s["camera_rmse_t"] == pytest.approx(single["camera_rmse_t"], rel=1e-8)


def test_evaluate_matches_in_run_report(workdir, tmp_path):
    _, agg = pipeline.evaluate(workdir / "run", workdir / "seq", tmp_path / "ev")
    s = parse_summary(workdir / "run" / "summary.txt")
    for key in ("camera_rmse_t", "object_rmse_t"):
        assert agg[key] == pytest.approx(s[key], rel=1e-6)
    # speeds and points travel through 9-digit text; speeds here are a few m/s
    assert agg["mean_speed_error"] == pytest.approx(s["mean_speed_error"], abs=1e-7)


def _truncate(src, dst, keep):
    rows = [r for r in dataio.parse_poses(src / "camera_trajectory.txt") if r[0] in keep]
    os.makedirs(dst)
    dataio.write_poses(rows, dst / "camera_trajectory.txt")


def test_frame_overlap_rules(workdir, tmp_path):
    _truncate(workdir / "run", tmp_path / "most", set(range(6)))
    reports, agg = pipeline.evaluate(tmp_path / "most", workdir / "seq", tmp_path / "e1")
    assert agg["camera_frames"] == 6
    _truncate(workdir / "run", tmp_path / "few", {0, 1, 2})
    with pytest.raises(FrameMismatch):
        pipeline.evaluate(tmp_path / "few", workdir / "seq", tmp_path / "e2")
    r = cli("evaluate", "--est", str(tmp_path / "few"), "--gt", str(workdir / "seq"), "--out", str(tmp_path / "e3"))
    assert r.returncode != 0 and r.stderr.startswith("metrics: FrameMismatch:")


def test_alignment_flag_accepted(workdir, tmp_path):
    r = cli("evaluate", "--est", str(workdir / "run"), "--gt", str(workdir / "seq"), "--out", str(tmp_path / "e"),
            "--align")
    assert r.returncode == 0, r.stderr
    assert "camera RMSE translational" in r.stdout


def test_bad_window_is_a_usage_error(workdir, tmp_path):
    r = cli("run", "--sequence", str(workdir / "seq"), "--settings", str(workdir / "seq" / "settings.txt"),
            "--out", str(tmp_path / "o"), "--window", "0")
    assert r.returncode != 0 and r.stderr.startswith("cli:")
