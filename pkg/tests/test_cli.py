import json

import pytest

from monorisk.cli import main
from monorisk.pipeline import parse_profile, parse_timeline


@pytest.fixture
def sim_dir(configs_dir, tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", "--config", str(configs_dir / "scenarios" / "approach.yaml"),
                 "--seed", "3", "--out-dir", str(out)]) == 0
    return out


def recorded_config(tmp_path, configs_dir, sim_dir):
    cfg = tmp_path / "rec.yaml"
    cfg.write_text(f"camera: {configs_dir / 'camera_720p.yaml'}\n"
                   f"input:\n  detections: {sim_dir / 'detections.jsonl'}\n"
                   f"  pulses: {sim_dir / 'pulses.jsonl'}\n  gps: {sim_dir / 'gps.jsonl'}\n")
    return cfg


def test_simulate_writes_streams(sim_dir):
    for name in ("detections", "pulses", "gps", "truth"):
        assert (sim_dir / f"{name}.jsonl").stat().st_size > 0


def test_run_recorded(tmp_path, configs_dir, sim_dir):
    cfg = recorded_config(tmp_path, configs_dir, sim_dir)
    out = tmp_path / "timeline.jsonl"
    prof = tmp_path / "profile.json"
    assert main(["run", "--config", str(cfg), "--out-timeline", str(out),
                 "--out-profile", str(prof), "--mode", "sequential"]) == 0
    records = parse_timeline(out.read_bytes())
    assert len(records) == 150 and records[-1]["frame"] == 149
    assert parse_profile(prof.read_bytes())["frames"] == 150


def test_run_to_stdout(configs_dir, capsysbinary):
    assert main(["run", "--config", str(configs_dir / "pipeline_approach.yaml")]) == 0
    assert len(parse_timeline(capsysbinary.readouterr().out)) == 150


def test_profile_json(configs_dir, capsys):
    assert main(["profile", "--config", str(configs_dir / "pipeline_approach.yaml"),
                 "--format", "json"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["frames"] == 150 and set(rep["stages"]) >= {"tracker", "state", "risk"}


def test_bad_config_exit_2(tmp_path):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("input: {}\n")
    assert main(["run", "--config", str(cfg)]) == 2
    assert main(["simulate", "--config", str(tmp_path / "missing.yaml"),
                 "--out-dir", str(tmp_path)]) == 2


def test_malformed_stream_exit_3(tmp_path, configs_dir):
    det = tmp_path / "det.jsonl"
    det.write_text('{"frame":0,"time_s":0.0,"boxes":[]}\nnot json\n')
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(f"camera: {configs_dir / 'camera_720p.yaml'}\ninput: {{detections: {det}}}\n")
    assert main(["run", "--config", str(cfg), "--out-timeline", str(tmp_path / "t.jsonl")]) == 3
    assert main(["run", "--config", str(cfg), "--mode", "sequential",
                 "--out-timeline", str(tmp_path / "t.jsonl")]) == 3


def test_missing_stream_exit_3(tmp_path, configs_dir):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(f"camera: {configs_dir / 'camera_720p.yaml'}\n"
                   f"input: {{detections: {tmp_path / 'none.jsonl'}}}\n")
    assert main(["run", "--config", str(cfg), "--out-timeline", str(tmp_path / "t.jsonl")]) == 3


def test_oracle_ttc(capsys):
    assert main(["oracle", "ttc", "--n", "100"]) == 0
    rep = json.loads(capsys.readouterr().out)["ttc"]
    assert rep["scenes"] == 100 and rep["finiteness_mismatches"] == 0
    assert rep["max_abs_diff_s"] <= 0.1


def test_oracle_geometry(capsys):
    assert main(["oracle", "geometry", "--n", "500"]) == 0
    assert json.loads(capsys.readouterr().out)["geometry"]["max_rel_err"] < 1e-9
