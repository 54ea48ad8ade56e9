import filecmp
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

import flowtrack.cli as cli
from flowtrack.errors import InvariantViolation
from flowtrack.flow import read_flo, write_flo
from flowtrack.io import read_detections, read_gt, read_poses, write_poses
from flowtrack.pose_model import Instance
from flowtrack.synth import generate, load_scenario

from test_metrics import hand_scenario

FIXTURE = Path(__file__).parent / "fixtures" / "bundle_small"


def run(*args):
    return cli.main([str(a) for a in args])


def test_track_fixture_defaults(tmp_path):
    out = tmp_path / "tracks.jsonl"
    assert run("track", "--bundle", FIXTURE, "--out", out) == 0
    frames, _ = read_poses(out)
    assert len(frames) == 6
    assert all(i.id is not None for f in frames for i in f)
    again = tmp_path / "again.jsonl"
    assert run("track", "--bundle", FIXTURE, "--out", again) == 0
    assert out.read_bytes() == again.read_bytes()


def _without_flow(tmp_path):
    b = tmp_path / "noflow"
    shutil.copytree(FIXTURE, b)
    shutil.rmtree(b / "flow")
    return b


def test_track_missing_flow_exit_2(tmp_path, capsys):
    b = _without_flow(tmp_path)
    assert run("track", "--bundle", b, "--metric", "flow", "--out", tmp_path / "t.jsonl") == 2
    assert "MissingFlow" in capsys.readouterr().err
    assert not (tmp_path / "t.jsonl").exists()


def test_track_bbox_runs_without_flow(tmp_path):
    b = _without_flow(tmp_path)
    assert run("track", "--bundle", b, "--metric", "bbox", "--out", tmp_path / "t.jsonl") == 0
    assert len(read_poses(tmp_path / "t.jsonl")[0]) == 6


def test_track_logs_resolved_config(tmp_path, capsys):
    run("track", "--bundle", FIXTURE, "--out", tmp_path / "t.jsonl", "--lq", "2", "--min-sim", "0.1")
    err = capsys.readouterr().err
    assert "track config" in err and '"l_q": 2' in err and '"min_match_similarity": 0.1' in err


def test_track_invariant_violation_exit_3(tmp_path, monkeypatch, capsys):
    def boom(*a, **k):
        raise InvariantViolation("duplicate ids")

    monkeypatch.setattr(cli, "run_sequence", boom)
    assert run("track", "--bundle", FIXTURE, "--out", tmp_path / "t.jsonl") == 3
    assert "internal error" in capsys.readouterr().err


def test_track_bad_bundle_exit_2(tmp_path):
    assert run("track", "--bundle", tmp_path / "missing", "--out", tmp_path / "t.jsonl") == 2


def test_bad_flag_value_exits_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("track", "--bundle", FIXTURE, "--out", tmp_path / "t.jsonl", "--box-thresh", "1.5")
    assert exc.value.code == 2


def _write_tracks(path, tracks, gt):
    write_poses(path, tracks, gt.schema)


def test_evaluate_identity(tmp_path, capsys):
    gt = read_gt(FIXTURE / "gt.jsonl")
    tracks = [[Instance(p.pose, p.track_id, 1.0) for p in people] for people in gt.frames]
    _write_tracks(tmp_path / "t.jsonl", tracks, gt)
    assert run("evaluate", "--tracks", tmp_path / "t.jsonl", "--gt", FIXTURE / "gt.jsonl",
               "--report", tmp_path / "r.txt") == 0
    out = capsys.readouterr().out
    mota_row = next(line for line in out.splitlines() if line.startswith("MOTA"))
    assert mota_row.split()[-1] == "1.0000"
    assert "total.mota=1.0" in (tmp_path / "r.txt").read_text()


def test_evaluate_hand_scenario(tmp_path, capsys):
    from flowtrack.io import write_gt
    tracks, gt = hand_scenario()
    write_gt(tmp_path / "g.jsonl", gt)
    _write_tracks(tmp_path / "t.jsonl", tracks, gt)
    assert run("evaluate", "--tracks", tmp_path / "t.jsonl", "--gt", tmp_path / "g.jsonl") == 0
    out = capsys.readouterr().out
    mota_row = next(line for line in out.splitlines() if line.startswith("MOTA"))
    assert mota_row.split()[-1] == "0.6667"


def test_evaluate_empty_tracks(tmp_path, capsys):
    (tmp_path / "t.jsonl").write_text('{"format":"flowtrack-poses","version":1,"schema":"posetrack15"}\n')
    assert run("evaluate", "--tracks", tmp_path / "t.jsonl", "--gt", FIXTURE / "gt.jsonl") == 0
    rows = {line.split()[0]: line.split() for line in capsys.readouterr().out.splitlines() if line.strip()}
    assert rows["Rec"][-1] == "0.0000"
    assert rows["MOTA"][-1] == "0.0000"


def test_evaluate_unreadable(tmp_path):
    assert run("evaluate", "--tracks", tmp_path / "none.jsonl", "--gt", FIXTURE / "gt.jsonl") == 2
    (tmp_path / "t.jsonl").write_text("garbage\n")
    assert run("evaluate", "--tracks", tmp_path / "t.jsonl", "--gt", FIXTURE / "gt.jsonl") == 2


def test_simulate_fast_walker_flows_round_trip(tmp_path):
    out = tmp_path / "fw"
    assert run("simulate", "--scenario", "fast_walker", "--out-bundle", out) == 0
    _, flows = generate(load_scenario("fast_walker"))
    for k, f in flows.items():
        path = out / "flow" / f"{k:06d}.flo"
        g = read_flo(path)
        assert np.array_equal(g.u, f.u.astype(np.float32)) and np.array_equal(g.v, f.v.astype(np.float32))
        write_flo(tmp_path / "re.flo", g)
        assert (tmp_path / "re.flo").read_bytes() == path.read_bytes()


def test_simulate_miss_rate_zero(tmp_path):
    out = tmp_path / "w"
    assert run("simulate", "--scenario", "walkers", "--out-bundle", out, "--miss-rate", "0") == 0
    gt = read_gt(out / "gt.jsonl")
    dets = read_detections(out / "detections.jsonl")
    # walkers has a false-positive rate; count only boxes overlapping a person
    from flowtrack.similarity import iou
    from flowtrack.synth import gt_box
    for people, boxes in zip(gt.frames, dets):
        hits = [b for b in boxes if any(iou(b, gt_box(p)) > 0.5 for p in people)]
        assert len(hits) == len(people)


def test_simulate_miss_rate_zero_exact_count(tmp_path):
    out = tmp_path / "s"
    assert run("simulate", "--scenario", "occlusion", "--out-bundle", out, "--miss-rate", "0") == 0
    gt = read_gt(out / "gt.jsonl")
    dets = read_detections(out / "detections.jsonl")
    assert [len(d) for d in dets] == [len(p) for p in gt.frames]


def test_simulate_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("simulate", "--scenario", "small", "--out-bundle", a, "--seed", "5") == 0
    assert run("simulate", "--scenario", "small", "--out-bundle", b, "--seed", "5") == 0
    cmp = filecmp.dircmp(a, b)
    names = ["manifest.json", "detections.jsonl", "poses.jsonl", "gt.jsonl"]
    assert filecmp.cmpfiles(a, b, names, shallow=False)[0] == names
    flows = sorted(p.name for p in (a / "flow").iterdir())
    assert filecmp.cmpfiles(a / "flow", b / "flow", flows, shallow=False)[0] == flows
    assert not cmp.left_only and not cmp.right_only


def test_fixture_matches_shipped_scenario(tmp_path):
    out = tmp_path / "small"
    assert run("simulate", "--scenario", "small", "--out-bundle", out) == 0
    for name in ["manifest.json", "detections.jsonl", "poses.jsonl", "gt.jsonl"]:
        assert (out / name).read_bytes() == (FIXTURE / name).read_bytes()


def test_simulate_bad_scenario(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"n_frames": 0, "frame_w": 10, "frame_h": 10, "actors": []}')
    assert run("simulate", "--scenario", bad, "--out-bundle", tmp_path / "o") == 2
    assert "InvalidScenario" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_inspect(capsys):
    assert run("inspect", "--bundle", FIXTURE) == 0
    out = capsys.readouterr().out
    assert "frames     6" in out and "flow       5 fields" in out and "posetrack15" in out


def test_log_level_env(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("FLOWTRACK_LOG", "error")
    assert run("track", "--bundle", FIXTURE, "--out", tmp_path / "t.jsonl") == 0
    assert capsys.readouterr().err == ""


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "flowtrack.cli", "inspect", "--bundle", str(FIXTURE)],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "frames     6" in proc.stdout
