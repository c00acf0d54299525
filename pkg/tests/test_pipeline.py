import json
import threading
import time

import pytest
from hypothesis import given, settings, strategies as st

from monorisk import pipeline as pl
from monorisk.detection_io import write_detection_stream
from monorisk.ego_speed import SpeedEstimate, write_gps_log, write_pulse_log
from monorisk.geometry import BoundingBox
from monorisk.risk import RiskReport, SceneEstimate
from monorisk.simulator import (NoiseSpec, Scenario, VehicleScript, collect, load_scenario,
                                simulate)
from monorisk.state_estimator import VehicleState
from monorisk.tracker import TrackedBox


def scenario_config(camera, seed=0, frames=100, **kw):
    sc = Scenario(camera, vehicles=(VehicleScript(1, 0.0, 18.0, v_y=-2.0),
                                    VehicleScript(2, 3.7, 30.0, v_y=1.0),
                                    VehicleScript(3, -3.7, 12.0, v_y=0.5)),
                  noise=NoiseSpec(1.0, 0.05, 0.3, seed=seed), duration_s=frames / 30.0)
    return pl.PipelineConfig(camera=camera, scenario=sc, seed=seed, **kw)


def recorded_files(tmp_path, scenario):
    data = collect(simulate(scenario))
    (tmp_path / "det.jsonl").write_bytes(write_detection_stream(data["detections"]))
    (tmp_path / "pulse.jsonl").write_bytes(write_pulse_log(data["pulses"]))
    (tmp_path / "gps.jsonl").write_bytes(write_gps_log(data["gps"]))
    return tmp_path / "det.jsonl", tmp_path / "pulse.jsonl", tmp_path / "gps.jsonl"


@pytest.mark.parametrize("mode", ["staged", "sequential"])
def test_empty_input(camera, tmp_path, mode):
    (tmp_path / "det.jsonl").write_bytes(b"")
    cfg = pl.PipelineConfig(camera=camera, detections_path=tmp_path / "det.jsonl", mode=mode)
    results, timing = pl.run(cfg)
    assert results == [] and timing.frames == 0
    assert pl.emit_timeline(results) == b""


def test_staged_equals_sequential(camera):
    cfg = scenario_config(camera)
    a, ta = pl.run(pl.with_overrides(cfg, mode="staged"))
    b, tb = pl.run(pl.with_overrides(cfg, mode="sequential"))
    assert len(a) == len(b) == 100
    assert pl.emit_timeline(a) == pl.emit_timeline(b)
    assert ta.frames == tb.frames == 100


def test_staged_equals_sequential_mc(camera):
    cfg = pl.with_overrides(scenario_config(camera, frames=40), risk_mode="mc", rollouts=4)
    a, _ = pl.run(pl.with_overrides(cfg, mode="staged"))
    b, _ = pl.run(pl.with_overrides(cfg, mode="sequential"))
    assert pl.emit_timeline(a) == pl.emit_timeline(b)
    assert any(r.risk.mode == "mc" for r in a)


def test_order_and_no_loss(camera):
    results, timing = pl.run(scenario_config(camera, frames=60))
    assert [r.frame_index for r in results] == list(range(60))
    times = [r.frame_time_s for r in results]
    assert times == sorted(times)
    for r in results:
        assert r.scene.frame_time_s == r.risk.frame_time_s == r.frame_time_s
    for stage in pl.STAGES:
        assert len(timing.samples_ms[stage]) == 60
        assert min(timing.samples_ms[stage]) >= 0


def test_recorded_matches_scenario(camera, tmp_path):
    cfg = scenario_config(camera, frames=90)
    det, pulse, gps = recorded_files(tmp_path, cfg.scenario)
    rec = pl.PipelineConfig(camera=camera, detections_path=det, pulses_path=pulse,
                            gps_path=gps, seed=cfg.seed)
    assert pl.emit_timeline(pl.run(rec)[0]) == pl.emit_timeline(pl.run(cfg)[0])


def test_gps_speed_source(camera, tmp_path):
    cfg = scenario_config(camera, frames=95)
    det, pulse, gps = recorded_files(tmp_path, cfg.scenario)
    rec = pl.PipelineConfig(camera=camera, detections_path=det, gps_path=gps,
                            speed=pl.SpeedConfig(source="gps"))
    results, _ = pl.run(rec)
    speeds = [r.speed for r in results]
    assert speeds[0] is None
    assert speeds[-1].source == "gps" and speeds[-1].speed_mps == pytest.approx(20.0, rel=1e-6)


def test_mc_without_speed_falls_back(camera):
    cfg = pl.with_overrides(scenario_config(camera, frames=20), risk_mode="mc",
                            speed_source="none")
    results, _ = pl.run(cfg)
    assert all(r.risk.mode == "ttc" and r.speed is None for r in results)


def test_backpressure_bounds_in_flight(camera):
    cap = 2
    cfg = pl.with_overrides(scenario_config(camera, frames=300), mode="staged")
    cfg = pl.PipelineConfig(**{**cfg.__dict__, "queue_capacity": cap})
    timing = pl.StageTiming()
    it = pl.iter_run(cfg, timing)
    next(it)
    time.sleep(0.5)
    produced = len(timing.samples_ms["input"])
    # four queues on the long branch plus one frame held by each of four threads
    assert produced <= 1 + 4 * cap + 4 + 1
    rest = list(it)
    assert len(rest) == 299


def test_malformed_input_aborts_with_location(camera, tmp_path):
    good = b'{"frame":0,"time_s":0.0,"boxes":[]}\n'
    (tmp_path / "det.jsonl").write_bytes(good + b"{oops\n")
    for mode in ("staged", "sequential"):
        cfg = pl.PipelineConfig(camera=camera, detections_path=tmp_path / "det.jsonl", mode=mode)
        with pytest.raises(pl.InputError, match="line 2"):
            pl.run(cfg)


def test_missing_input_file(camera, tmp_path):
    cfg = pl.PipelineConfig(camera=camera, detections_path=tmp_path / "nope.jsonl",
                            mode="sequential")
    with pytest.raises(pl.InputError):
        pl.run(cfg)


def test_stage_failure_drains(camera, monkeypatch):
    original = pl.RiskStage.process

    def boom(self, msg, speed):
        if msg.frame_index == 5:
            raise RuntimeError("risk exploded")
        return original(self, msg, speed)

    monkeypatch.setattr(pl.RiskStage, "process", boom)
    before = threading.active_count()
    with pytest.raises(pl.StageError) as err:
        pl.run(scenario_config(camera, frames=200))
    assert err.value.stage == "risk"
    deadline = time.time() + 5
    while threading.active_count() > before and time.time() < deadline:
        time.sleep(0.01)
    assert threading.active_count() == before


def test_consumer_abandoning_run_stops_threads(camera):
    before = threading.active_count()
    it = pl.iter_run(scenario_config(camera, frames=300))
    next(it)
    it.close()
    deadline = time.time() + 5
    while threading.active_count() > before and time.time() < deadline:
        time.sleep(0.01)
    assert threading.active_count() == before


def test_config_invariants(camera, tmp_path):
    sc = Scenario(camera)
    with pytest.raises(pl.ConfigError):
        pl.PipelineConfig(camera=camera)
    with pytest.raises(pl.ConfigError):
        pl.PipelineConfig(camera=camera, scenario=sc, detections_path=tmp_path / "x")
    with pytest.raises(pl.ConfigError):
        pl.PipelineConfig(camera=camera, scenario=sc, queue_capacity=0)
    with pytest.raises(pl.ConfigError):
        pl.PipelineConfig(camera=camera, scenario=sc, mode="parallel")
    with pytest.raises(pl.ConfigError):
        pl.RiskConfig(mode="magic")
    with pytest.raises(pl.ConfigError):
        pl.SpeedConfig(source="radar")


def test_load_config_files(configs_dir):
    cfg = pl.load_config(configs_dir / "pipeline_approach.yaml")
    assert cfg.scenario is not None and cfg.camera == cfg.scenario.camera
    rec = pl.load_config(configs_dir / "pipeline_recorded.yaml")
    assert rec.detections_path.name == "detections.jsonl" and rec.camera.focal_length_px == 700


@pytest.mark.parametrize("body", [
    "input: {}\n",
    "input: {scenario: scenarios/approach.yaml}\nbogus: 1\n",
    "input: {scenario: scenarios/approach.yaml}\ntracker: {n_particles: 0}\n",
    "input: {scenario: missing.yaml}\n",
    "input: {detections: d.jsonl}\n",
    "- not a mapping\n",
    "input: [unterminated\n",
])
def test_bad_config_files(configs_dir, tmp_path, body):
    path = tmp_path / "cfg.yaml"
    path.write_text(body.replace("scenarios/", f"{configs_dir}/scenarios/"))
    with pytest.raises(pl.ConfigError):
        pl.load_config(path)


def test_profile_zero_frames():
    t = pl.StageTiming()
    assert pl.parse_profile(pl.profile_report(t, "json"))["stages"] == {}
    text = pl.profile_report(t, "text").decode()
    assert text.strip().splitlines() == [text.strip().splitlines()[0]]


def test_profile_means_match_samples():
    t = pl.StageTiming()
    samples = {"tracker": [1.0, 2.0, 4.5], "state": [0.25, 0.25, 0.5], "risk": [3.0, 0.0, 3.0],
               "input": [0.1, 0.1, 0.1], "speed": [0.0, 0.0, 0.3]}
    for k, xs in samples.items():
        for x in xs:
            t.record(k, x)
    t.frames, t.elapsed_s = 3, 0.06
    rep = pl.parse_profile(pl.profile_report(t, "json"))
    for k, xs in samples.items():
        assert rep["stages"][k]["mean_ms"] == pytest.approx(sum(xs) / len(xs))
        assert rep["stages"][k]["total_ms"] == pytest.approx(sum(xs))
    assert rep["fps"] == pytest.approx(50.0)
    assert rep["core_ms_per_frame"] == pytest.approx(2.5 + 1 / 3 + 2.0)
    assert rep["wall_ms_per_frame"] == pytest.approx(20.0)
    text = pl.profile_report(t, "text").decode()
    assert "tracker" in text and "50.00" in text


def test_profile_roundtrip(camera):
    _, timing = pl.run(scenario_config(camera, frames=30))
    data = pl.profile_report(timing, "json")
    assert pl.parse_profile(data) == json.loads(json.dumps(pl.profile_summary(timing)))
    with pytest.raises(ValueError):
        pl.profile_report(timing, "xml")


def _result(i, objs, speed):
    states = {oid: VehicleState(*vals) for oid, vals in objs.items()}
    ttcs = {oid: (None if vals[3] >= 0 else 1.5) for oid, vals in objs.items()}
    risk = max([1 / 1.5 for t in ttcs.values() if t], default=0.0)
    return pl.FrameResult(i, i / 30, {oid: TrackedBox(BoundingBox(0, 0, 1, 1)) for oid in objs},
                          SceneEstimate(i / 30, states, speed),
                          None if speed is None else SpeedEstimate(speed, "lane", 1.0, i / 30),
                          RiskReport(i / 30, risk, ttcs))


def test_timeline_empty_and_single():
    assert pl.emit_timeline([]) == b""
    data = pl.emit_timeline([_result(0, {4: (1.0, 10.0, 0.0, -1.0)}, 20.0)])
    (rec,) = pl.parse_timeline(data)
    assert rec["frame"] == 0 and rec["ego_speed"] == 20.0 and rec["risk"] == pytest.approx(1 / 1.5)
    assert rec["objects"][0]["id"] == 4 and rec["objects"][0]["ttc"] == 1.5


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.dictionaries(st.integers(0, 50), st.tuples(finite, finite, finite, finite),
                                          max_size=4),
                          st.one_of(st.none(), st.floats(0, 60))), max_size=6))
def test_timeline_roundtrip(frames):
    results = [_result(i, objs, speed) for i, (objs, speed) in enumerate(frames)]
    data = pl.emit_timeline(results)
    assert pl.parse_timeline(data) == [pl.result_to_record(r) for r in results]
    assert pl.emit_timeline(results) == data
