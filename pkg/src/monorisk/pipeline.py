"""Stage orchestration, timing and timeline output.

Stages: tracker -> state estimator -> risk, with the ego-speed estimator on
a parallel branch that joins at the risk stage. ``staged`` mode runs each
stage on its own thread connected by bounded queues; ``sequential`` runs the
same stage objects in one loop. Both produce identical results.
"""

from __future__ import annotations

import json
import queue
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import yaml

from .detection_io import (DetectionFrame, DetectionStreamError, dumps_record,
                           filter_vehicle_classes, iter_records, read_detection_stream)
from .ego_speed import (LaneMarkingSpec, LaneSpeedEstimator, PulseLogError, PulseSample,
                        SpeedEstimate, gps_speed, read_gps_log, read_pulse_log)
from .geometry import CameraModel, GeometryError, load_camera
from .risk import (DriverModelParams, DriverModelSampler, RiskReport, RolloutConfig,
                   SceneEstimate, VehicleDims, risk_mc, risk_ttc)
from .simulator import Scenario, ScenarioError, load_scenario, simulate
from .state_estimator import StateConfig, StateEstimator, VehicleState
from .tracker import TrackedBox, TrackerBank, TrackerConfig, TrackerError

STAGES = ("input", "tracker", "state", "speed", "risk")


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


# configuration ------------------------------------------------------------

@dataclass(frozen=True)
class SpeedConfig:
    source: str = "lane"
    smoothing: float = 0.3
    max_disagreement: float = 0.25
    marking: LaneMarkingSpec = field(default_factory=LaneMarkingSpec)

    def __post_init__(self):
        if self.source not in ("lane", "gps", "none"):
            raise ConfigError(f"speed source must be lane|gps|none, got {self.source!r}")


@dataclass(frozen=True)
class RiskConfig:
    mode: str = "ttc"
    horizon_s: float = 10.0
    dt_s: float = 0.1
    rollouts: int = 10
    seed: int = 0
    driver_mean: DriverModelParams = field(default_factory=DriverModelParams)
    driver_std: Optional[Dict[str, float]] = None
    lane_width_m: float = 3.7
    extra_lanes: int = 1
    lane_change_duration_s: float = 3.0
    max_brake_mps2: float = 9.0

    def __post_init__(self):
        if self.mode not in ("ttc", "mc"):
            raise ConfigError(f"risk mode must be ttc|mc, got {self.mode!r}")
        if self.rollouts < 1:
            raise ConfigError("rollouts must be >= 1")
        if not self.horizon_s > 0 or not self.dt_s > 0:
            raise ConfigError("horizon_s and dt_s must be > 0")


@dataclass(frozen=True)
class PipelineConfig:
    camera: CameraModel
    scenario: Optional[Scenario] = None
    detections_path: Optional[Path] = None
    pulses_path: Optional[Path] = None
    gps_path: Optional[Path] = None
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    state: StateConfig = field(default_factory=StateConfig)
    speed: SpeedConfig = field(default_factory=SpeedConfig)
    risk: RiskConfig = field(default_factory=RiskConfig)
    allowed_classes: Tuple[str, ...] = ("car", "truck", "van", "bus")
    mode: str = "staged"
    queue_capacity: int = 4
    seed: int = 0
    out_timeline: Optional[Path] = None
    out_profile: Optional[Path] = None

    def __post_init__(self):
        if (self.scenario is None) == (self.detections_path is None):
            raise ConfigError("exactly one input source (scenario or detections) is required")
        if self.mode not in ("staged", "sequential"):
            raise ConfigError(f"mode must be staged|sequential, got {self.mode!r}")
        if self.queue_capacity < 1:
            raise ConfigError("queue_capacity must be >= 1")


def _path(base: Path, value) -> Optional[Path]:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def config_from_dict(data: dict, base_dir: Path = Path(".")) -> PipelineConfig:
    try:
        data = dict(data or {})
        inp = dict(data.pop("input", {}) or {})
        scenario = None
        if inp.get("scenario") is not None:
            scenario = load_scenario(_path(base_dir, inp["scenario"]))
        cam = data.pop("camera", None)
        if cam is None:
            if scenario is None:
                raise ConfigError("recorded input needs a camera config")
            camera = scenario.camera
        elif isinstance(cam, (str, Path)):
            camera = load_camera(_path(base_dir, cam))
        else:
            camera = CameraModel.from_dict(cam)
        speed = dict(data.pop("speed", {}) or {})
        if "marking" in speed:
            speed["marking"] = LaneMarkingSpec(**speed["marking"])
        elif scenario is not None:
            speed["marking"] = scenario.marking
        risk = dict(data.pop("risk", {}) or {})
        if "driver_mean" in risk:
            risk["driver_mean"] = DriverModelParams(**risk["driver_mean"])
        if scenario is not None and "lane_width_m" not in risk:
            risk["lane_width_m"] = scenario.lane_width_m
        out = dict(data.pop("output", {}) or {})
        if "allowed_classes" in data:
            data["allowed_classes"] = tuple(data["allowed_classes"])
        return PipelineConfig(
            camera=camera,
            scenario=scenario,
            detections_path=_path(base_dir, inp.get("detections")),
            pulses_path=_path(base_dir, inp.get("pulses")),
            gps_path=_path(base_dir, inp.get("gps")),
            tracker=TrackerConfig.from_dict(data.pop("tracker", {})),
            state=StateConfig.from_dict(data.pop("state", {})),
            speed=SpeedConfig(**speed),
            risk=RiskConfig(**risk),
            out_timeline=_path(base_dir, out.get("timeline")),
            out_profile=_path(base_dir, out.get("profile")),
            **data,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError, OSError) as exc:
        raise ConfigError(f"bad pipeline config: {exc}") from None


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return config_from_dict(data, path.parent)


# messages -------------------------------------------------------------------

@dataclass(frozen=True)
class FrameInput:
    frame: DetectionFrame
    pulses: Tuple[PulseSample, ...] = ()
    gps: Tuple[Tuple[float, float, float], ...] = ()


@dataclass(frozen=True)
class TrackedFrame:
    frame_index: int
    frame_time_s: float
    tracked: Dict[int, TrackedBox]


@dataclass(frozen=True)
class StateFrame:
    frame_index: int
    frame_time_s: float
    tracked: Dict[int, TrackedBox]
    states: Dict[int, VehicleState]


@dataclass(frozen=True)
class SpeedFrame:
    frame_index: int
    frame_time_s: float
    estimate: Optional[SpeedEstimate]


@dataclass(frozen=True)
class FrameResult:
    frame_index: int
    frame_time_s: float
    tracked: Dict[int, TrackedBox]
    scene: SceneEstimate
    speed: Optional[SpeedEstimate]
    risk: RiskReport


# input ------------------------------------------------------------------------

def _merge_until(frames: Iterable[DetectionFrame], pulses: Iterator[PulseSample],
                 fixes: Iterator[tuple]) -> Iterator[FrameInput]:
    pending_p, pending_g = next(pulses, None), next(fixes, None)
    for frame in frames:
        ps, gs = [], []
        while pending_p is not None and pending_p.frame_time_s <= frame.frame_time_s:
            ps.append(pending_p)
            pending_p = next(pulses, None)
        while pending_g is not None and pending_g[0] <= frame.frame_time_s:
            gs.append(pending_g)
            pending_g = next(fixes, None)
        yield FrameInput(frame, tuple(ps), tuple(gs))


def iter_inputs(config: PipelineConfig) -> Iterator[FrameInput]:
    if config.scenario is not None:
        for sf in simulate(config.scenario):
            yield FrameInput(sf.detections, (sf.pulse,), (sf.gps,) if sf.gps else ())
        return
    want_lane = config.speed.source == "lane" and config.pulses_path is not None
    want_gps = config.speed.source == "gps" and config.gps_path is not None
    try:
        with open(config.detections_path, "rb") as det:
            pulses = iter(())
            fixes = iter(())
            handles = []
            try:
                if want_lane:
                    handles.append(open(config.pulses_path, "rb"))
                    pulses = read_pulse_log(handles[-1])
                if want_gps:
                    with open(config.gps_path, "rb") as g:
                        fixes = iter(read_gps_log(g))
                yield from _merge_until(read_detection_stream(det), pulses, fixes)
            finally:
                for h in handles:
                    h.close()
    except OSError as exc:
        raise InputError(str(exc)) from None


# stages -------------------------------------------------------------------------

class TrackerStage:
    name = "tracker"

    def __init__(self, config: PipelineConfig):
        self.allowed = frozenset(config.allowed_classes)
        self.bank = TrackerBank(config.tracker, config.camera.image_width_px, config.seed)

    def process(self, frame: DetectionFrame) -> TrackedFrame:
        frame = filter_vehicle_classes(frame, self.allowed)
        return TrackedFrame(frame.frame_index, frame.frame_time_s, self.bank.step(frame))


class StateStage:
    name = "state"

    def __init__(self, config: PipelineConfig):
        self.estimator = StateEstimator(config.camera, config.state)

    def process(self, msg: TrackedFrame) -> StateFrame:
        states = self.estimator.update(msg.tracked, msg.frame_time_s)
        return StateFrame(msg.frame_index, msg.frame_time_s, msg.tracked, states)


class SpeedStage:
    name = "speed"

    def __init__(self, config: PipelineConfig):
        self.source = config.speed.source
        self.lane = LaneSpeedEstimator(config.speed.marking, config.speed.smoothing,
                                       config.speed.max_disagreement)
        self.current: Optional[SpeedEstimate] = None
        self.last_fix = None

    def process(self, item: FrameInput) -> SpeedFrame:
        frame = item.frame
        if self.source == "lane":
            for p in item.pulses:
                self.current = self.lane.update(p)
        elif self.source == "gps":
            for fix in item.gps:
                if self.last_fix is not None:
                    est = gps_speed([self.last_fix, fix])
                    if est:
                        self.current = est[-1]
                self.last_fix = fix
        return SpeedFrame(frame.frame_index, frame.frame_time_s, self.current)


class RiskStage:
    name = "risk"

    def __init__(self, config: PipelineConfig):
        rc = config.risk
        self.config = rc
        cam = config.camera
        self.dims = VehicleDims(cam.assumed_vehicle_width_m, cam.assumed_vehicle_length_m)
        self.sampler = DriverModelSampler(rc.driver_mean, rc.driver_std)
        self.rollout = RolloutConfig(rc.horizon_s, rc.dt_s, rc.lane_width_m, rc.extra_lanes,
                                     rc.lane_change_duration_s, rc.max_brake_mps2, self.dims)

    def process(self, msg: StateFrame, speed: SpeedFrame) -> FrameResult:
        if speed.frame_index != msg.frame_index:
            raise RuntimeError(f"branch join mismatch: frame {msg.frame_index} vs {speed.frame_index}")
        rc = self.config
        ego = speed.estimate.speed_mps if speed.estimate is not None else None
        scene = SceneEstimate(msg.frame_time_s, msg.states, ego)
        if rc.mode == "mc" and ego is not None:
            report = risk_mc(scene, rc.rollouts, rc.horizon_s, rc.dt_s,
                             (rc.seed, msg.frame_index), self.sampler, self.rollout)
        else:
            report = risk_ttc(scene, rc.horizon_s, rc.dt_s, self.dims)
        return FrameResult(msg.frame_index, msg.frame_time_s, msg.tracked, scene,
                           speed.estimate, report)


# timing -------------------------------------------------------------------------------

@dataclass
class StageTiming:
    samples_ms: Dict[str, List[float]] = field(default_factory=lambda: {s: [] for s in STAGES})
    frames: int = 0
    elapsed_s: float = 0.0

    def record(self, stage: str, ms: float) -> None:
        self.samples_ms.setdefault(stage, []).append(ms)

    def mean_ms(self, stage: str) -> float:
        xs = self.samples_ms.get(stage) or []
        return sum(xs) / len(xs) if xs else 0.0

    @property
    def fps(self) -> float:
        return self.frames / self.elapsed_s if self.elapsed_s > 0 else 0.0


def _timed(timing: StageTiming, stage: str, fn, *args):
    t0 = time.perf_counter()
    out = fn(*args)
    timing.record(stage, (time.perf_counter() - t0) * 1e3)
    return out


def _timed_iter(timing: StageTiming, it: Iterator):
    while True:
        t0 = time.perf_counter()
        try:
            item = next(it)
        except StopIteration:
            return
        timing.record("input", (time.perf_counter() - t0) * 1e3)
        yield item


def _wrap_input_errors(it: Iterator) -> Iterator:
    try:
        yield from it
    except (DetectionStreamError, PulseLogError, ScenarioError, GeometryError) as exc:
        raise InputError(str(exc)) from exc


# execution ------------------------------------------------------------------------------

def _stages(config: PipelineConfig):
    return TrackerStage(config), StateStage(config), SpeedStage(config), RiskStage(config)


def _run_sequential(config: PipelineConfig, timing: StageTiming) -> Iterator[FrameResult]:
    tracker, state, speed, risk = _stages(config)
    for item in _timed_iter(timing, _wrap_input_errors(iter_inputs(config))):
        tracked = _timed(timing, "tracker", tracker.process, item.frame)
        states = _timed(timing, "state", state.process, tracked)
        spd = _timed(timing, "speed", speed.process, item)
        yield _timed(timing, "risk", risk.process, states, spd)


_EOS = object()


@dataclass
class _Failure:
    stage: str
    error: BaseException


class _Channel:
    """Bounded blocking queue whose put/get give up once the run is cancelled."""

    def __init__(self, capacity: int, cancel: threading.Event):
        self.q: queue.Queue = queue.Queue(maxsize=capacity)
        self.cancel = cancel

    def put(self, item) -> bool:
        while not self.cancel.is_set():
            try:
                self.q.put(item, timeout=0.05)
                return True
            except queue.Full:
                continue
        return False

    def get(self):
        while True:
            try:
                return self.q.get(timeout=0.05)
            except queue.Empty:
                if self.cancel.is_set():
                    return _Failure("cancelled", RuntimeError("run cancelled"))


def _run_staged(config: PipelineConfig, timing: StageTiming) -> Iterator[FrameResult]:
    tracker, state, speed, risk = _stages(config)
    cancel = threading.Event()
    cap = config.queue_capacity
    q_det, q_spd_in, q_trk, q_state, q_spd, q_out = (_Channel(cap, cancel) for _ in range(6))

    def source():
        try:
            for item in _timed_iter(timing, _wrap_input_errors(iter_inputs(config))):
                if not (q_det.put(item.frame) and q_spd_in.put(item)):
                    return
        except BaseException as exc:  # noqa: BLE001 - forwarded to the consumer
            q_det.put(_Failure("input", exc))
            q_spd_in.put(_Failure("input", exc))
            return
        q_det.put(_EOS)
        q_spd_in.put(_EOS)

    def worker(stage, inbox: _Channel, outbox: _Channel):
        while True:
            msg = inbox.get()
            if msg is _EOS or isinstance(msg, _Failure):
                outbox.put(msg)
                return
            try:
                out = _timed(timing, stage.name, stage.process, msg)
            except BaseException as exc:  # noqa: BLE001
                outbox.put(_Failure(stage.name, exc))
                return
            if not outbox.put(out):
                return

    def joiner():
        while True:
            a, b = q_state.get(), q_spd.get()
            for msg in (a, b):
                if isinstance(msg, _Failure):
                    q_out.put(msg)
                    return
            if a is _EOS or b is _EOS:
                q_out.put(_EOS if a is b else
                          _Failure("risk", RuntimeError("branches ended at different frames")))
                return
            try:
                out = _timed(timing, "risk", risk.process, a, b)
            except BaseException as exc:  # noqa: BLE001
                q_out.put(_Failure("risk", exc))
                return
            if not q_out.put(out):
                return

    threads = [
        threading.Thread(target=source, name="input", daemon=True),
        threading.Thread(target=worker, args=(tracker, q_det, q_trk), name="tracker", daemon=True),
        threading.Thread(target=worker, args=(state, q_trk, q_state), name="state", daemon=True),
        threading.Thread(target=worker, args=(speed, q_spd_in, q_spd), name="speed", daemon=True),
        threading.Thread(target=joiner, name="risk", daemon=True),
    ]
    for t in threads:
        t.start()
    try:
        while True:
            msg = q_out.get()
            if msg is _EOS:
                break
            if isinstance(msg, _Failure):
                if isinstance(msg.error, InputError):
                    raise msg.error
                raise StageError(msg.stage, msg.error)
            yield msg
    finally:
        cancel.set()
        for t in threads:
            t.join(timeout=5)


def iter_run(config: PipelineConfig, timing: Optional[StageTiming] = None) -> Iterator[FrameResult]:
    """Stream FrameResults in input order; ``timing`` is filled in as frames complete."""
    timing = timing if timing is not None else StageTiming()
    runner = _run_staged if config.mode == "staged" else _run_sequential
    start = time.perf_counter()
    try:
        for result in runner(config, timing):
            timing.frames += 1
            yield result
    except (TrackerError, GeometryError) as exc:
        raise StageError("pipeline", exc) from exc
    finally:
        timing.elapsed_s = time.perf_counter() - start


def run(config: PipelineConfig) -> Tuple[List[FrameResult], StageTiming]:
    timing = StageTiming()
    results = list(iter_run(config, timing))
    return results, timing


# output --------------------------------------------------------------------------------

def _num(x: Optional[float]):
    return None if x is None else float(x)


def result_to_record(r: FrameResult) -> dict:
    return {
        "frame": int(r.frame_index),
        "time_s": float(r.frame_time_s),
        "risk": float(r.risk.risk),
        "mode": r.risk.mode,
        "rollouts": int(r.risk.rollout_count),
        "ego_speed": _num(r.speed.speed_mps) if r.speed is not None else None,
        "objects": [
            {"id": int(oid), "d_x": float(s.d_x), "d_y": float(s.d_y), "v_x": float(s.v_x),
             "v_y": float(s.v_y), "ttc": _num(r.risk.per_object_ttc.get(oid)),
             "coasted": bool(s.coasted), "stale": bool(s.stale)}
            for oid, s in sorted(r.scene.objects.items())
        ],
    }


def emit_timeline(results: Iterable[FrameResult]) -> bytes:
    return "".join(dumps_record(result_to_record(r)) + "\n" for r in results).encode("utf-8")


def parse_timeline(source) -> List[dict]:
    return [rec for _, rec in iter_records(source, InputError)]


def profile_summary(timing: StageTiming) -> dict:
    stages = {}
    if timing.frames:
        for name in STAGES:
            xs = timing.samples_ms.get(name) or []
            if xs:
                stages[name] = {"mean_ms": sum(xs) / len(xs), "total_ms": sum(xs),
                                "frames": len(xs)}
    per_frame = timing.elapsed_s * 1e3 / timing.frames if timing.frames else 0.0
    core = sum(stages[s]["mean_ms"] for s in ("tracker", "state", "risk") if s in stages)
    tracked = sum(v["mean_ms"] for v in stages.values())
    return {
        "frames": timing.frames,
        "elapsed_s": timing.elapsed_s,
        "fps": timing.fps,
        "stages": stages,
        "core_ms_per_frame": core,
        "wall_ms_per_frame": per_frame,
        "untracked_ms_per_frame": per_frame - tracked if timing.frames else 0.0,
    }


def profile_report(timing: StageTiming, fmt: str = "text") -> bytes:
    """Mean per-frame stage times and throughput, as ``json`` or a ``text`` table."""
    summary = profile_summary(timing)
    if fmt == "json":
        return (json.dumps(summary, indent=2, sort_keys=True) + "\n").encode("utf-8")
    if fmt != "text":
        raise ValueError(f"unknown profile format {fmt!r}")
    lines = [f"{'stage':<10} {'ms/frame':>10} {'frames':>8}"]
    for name, s in summary["stages"].items():
        lines.append(f"{name:<10} {s['mean_ms']:>10.4f} {s['frames']:>8d}")
    if summary["frames"]:
        lines.append(f"{'core':<10} {summary['core_ms_per_frame']:>10.4f}")
        lines.append(f"{'untracked':<10} {summary['untracked_ms_per_frame']:>10.4f}")
        lines.append(f"{'total FPS':<10} {summary['fps']:>10.2f} {summary['frames']:>8d}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def parse_profile(data: bytes) -> dict:
    return json.loads(data.decode("utf-8"))


def with_overrides(config: PipelineConfig, **kw) -> PipelineConfig:
    """Apply CLI-style overrides: mode, risk_mode, rollouts, seed, speed_source, outputs."""
    risk, speed = config.risk, config.speed
    if kw.get("risk_mode") is not None:
        risk = replace(risk, mode=kw["risk_mode"])
    if kw.get("rollouts") is not None:
        risk = replace(risk, rollouts=kw["rollouts"])
    if kw.get("seed") is not None:
        risk = replace(risk, seed=kw["seed"])
    if kw.get("speed_source") is not None:
        speed = replace(speed, source=kw["speed_source"])
    out = replace(config, risk=risk, speed=speed)
    if kw.get("seed") is not None:
        out = replace(out, seed=kw["seed"])
        if out.scenario is not None:
            out = replace(out, scenario=out.scenario.with_seed(kw["seed"]))
    for key in ("mode", "out_timeline", "out_profile"):
        if kw.get(key) is not None:
            out = replace(out, **{key: kw[key]})
    return out
