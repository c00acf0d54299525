"""Ground-truth world, scripted kinematics and the noisy detection projector.

Vehicle positions and velocities are ego-relative. Vehicle scripts give
relative longitudinal acceleration (piecewise constant) and lane changes with
a half-cosine lateral profile; the ego script gives absolute speed, which
drives the odometer behind the lane-marking pulses and the GPS fixes.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from .detection_io import Detection, DetectionFrame, dumps_record, iter_records
from .ego_speed import LaneMarkingSpec, PulseSample
from .geometry import BoundingBox, CameraModel, load_camera, project_vehicle

GPS_ORIGIN = (37.0, -122.0)


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class VehicleTruth:
    id: int
    d_x: float
    d_y: float
    v_x: float = 0.0
    v_y: float = 0.0
    width_m: float = 1.8
    length_m: float = 4.5
    height_m: float = 1.5
    visible: bool = True


@dataclass(frozen=True)
class WorldState:
    sim_time_s: float
    ego_speed_mps: float
    ego_lane_index: int = 0
    vehicles: Tuple[VehicleTruth, ...] = ()
    lane_width_m: float = 3.7
    ego_odometer_m: float = 0.0

    def __post_init__(self):
        ids = [v.id for v in self.vehicles]
        if len(set(ids)) != len(ids):
            raise ScenarioError(f"duplicate vehicle ids: {ids}")
        if not self.lane_width_m > 0:
            raise ScenarioError("lane_width_m must be > 0")


@dataclass(frozen=True)
class NoiseSpec:
    box_edge_sigma_px: float = 0.0
    miss_rate: float = 0.0
    clutter_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.box_edge_sigma_px < 0:
            raise ScenarioError("box_edge_sigma_px must be >= 0")
        if not 0 <= self.miss_rate <= 1:
            raise ScenarioError("miss_rate must be in [0, 1]")
        if self.clutter_rate < 0:
            raise ScenarioError("clutter_rate must be >= 0")


@dataclass(frozen=True)
class LaneChange:
    start_s: float
    duration_s: float
    delta_m: float

    def offset(self, t: float) -> float:
        tau = (t - self.start_s) / self.duration_s
        if tau <= 0:
            return 0.0
        if tau >= 1:
            return self.delta_m
        return self.delta_m * (1 - math.cos(math.pi * tau)) / 2

    def rate(self, t: float) -> float:
        tau = (t - self.start_s) / self.duration_s
        if tau <= 0 or tau >= 1:
            return 0.0
        return self.delta_m * math.pi * math.sin(math.pi * tau) / (2 * self.duration_s)


@dataclass(frozen=True)
class AccelProfile:
    """Piecewise-constant acceleration: ``accel[i]`` holds from ``starts[i]`` on; zero before."""

    starts: Tuple[float, ...] = ()
    accels: Tuple[float, ...] = ()

    @classmethod
    def from_pairs(cls, pairs) -> "AccelProfile":
        pairs = sorted((float(t), float(a)) for t, a in (pairs or ()))
        return cls(tuple(t for t, _ in pairs), tuple(a for _, a in pairs))

    def accel_at(self, t: float) -> float:
        i = bisect.bisect_right(self.starts, t) - 1
        return self.accels[i] if i >= 0 else 0.0

    def advance(self, p: float, v: float, t0: float, dt: float) -> Tuple[float, float]:
        """Exact ballistic integration over [t0, t0 + dt], splitting at segment starts."""
        t, t_end = t0, t0 + dt
        while t < t_end:
            i = bisect.bisect_right(self.starts, t)
            nxt = self.starts[i] if i < len(self.starts) else t_end
            h = min(nxt, t_end) - t
            a = self.accel_at(t)
            p += v * h + 0.5 * a * h * h
            v += a * h
            t += h
        return p, v


@dataclass(frozen=True)
class VehicleScript:
    id: int
    d_x: float
    d_y: float
    v_x: float = 0.0
    v_y: float = 0.0
    width_m: float = 1.8
    length_m: float = 4.5
    height_m: float = 1.5
    accel: AccelProfile = field(default_factory=AccelProfile)
    lane_changes: Tuple[LaneChange, ...] = ()
    hidden: Tuple[Tuple[float, float], ...] = ()

    def lateral(self, t: float) -> Tuple[float, float]:
        x = self.d_x + self.v_x * t + sum(lc.offset(t) for lc in self.lane_changes)
        vx = self.v_x + sum(lc.rate(t) for lc in self.lane_changes)
        return x, vx

    def visible_at(self, t: float) -> bool:
        return not any(a <= t < b for a, b in self.hidden)

    def truth_at(self, t: float) -> VehicleTruth:
        """Closed-form state at script time ``t``."""
        y, vy = self.accel.advance(self.d_y, self.v_y, 0.0, t) if t > 0 else (self.d_y, self.v_y)
        x, vx = self.lateral(t)
        return VehicleTruth(self.id, x, y, vx, vy, self.width_m, self.length_m, self.height_m,
                            self.visible_at(t))


@dataclass(frozen=True)
class EgoScript:
    speed_mps: float = 20.0
    lane_index: int = 0
    accel: AccelProfile = field(default_factory=AccelProfile)


@dataclass(frozen=True)
class Scenario:
    camera: CameraModel
    vehicles: Tuple[VehicleScript, ...] = ()
    ego: EgoScript = field(default_factory=EgoScript)
    marking: LaneMarkingSpec = field(default_factory=LaneMarkingSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    duration_s: float = 10.0
    frame_rate_hz: float = 30.0
    lane_width_m: float = 3.7
    gps_rate_hz: float = 1.0

    def __post_init__(self):
        if not self.frame_rate_hz > 0:
            raise ScenarioError("frame_rate_hz must be > 0")
        if self.duration_s < 0:
            raise ScenarioError("duration_s must be >= 0")
        ids = [v.id for v in self.vehicles]
        if len(set(ids)) != len(ids):
            raise ScenarioError(f"duplicate vehicle ids: {ids}")

    @property
    def frame_count(self) -> int:
        return int(round(self.duration_s * self.frame_rate_hz))

    def script(self, vehicle_id: int) -> Optional[VehicleScript]:
        for s in self.vehicles:
            if s.id == vehicle_id:
                return s
        return None

    def initial_world(self) -> WorldState:
        return WorldState(
            sim_time_s=0.0,
            ego_speed_mps=self.ego.speed_mps,
            ego_lane_index=self.ego.lane_index,
            vehicles=tuple(s.truth_at(0.0) for s in self.vehicles),
            lane_width_m=self.lane_width_m,
        )

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, noise=replace(self.noise, seed=seed))


def step_world(world: WorldState, dt: float, scenario: Scenario) -> WorldState:
    """Advance the world by ``dt`` seconds under the scenario scripts.

    Vehicles without a script keep their velocity.
    """
    if not dt > 0:
        raise ScenarioError(f"dt must be > 0, got {dt}")
    t0 = world.sim_time_s
    t1 = t0 + dt
    vehicles = []
    for v in world.vehicles:
        script = scenario.script(v.id)
        if script is None:
            vehicles.append(replace(v, d_x=v.d_x + v.v_x * dt, d_y=v.d_y + v.v_y * dt))
            continue
        y, vy = script.accel.advance(v.d_y, v.v_y, t0, dt)
        x0, _ = script.lateral(t0)
        x1, vx = script.lateral(t1)
        vehicles.append(replace(v, d_x=v.d_x + (x1 - x0), d_y=y, v_x=vx, v_y=vy,
                                visible=script.visible_at(t1)))
    odo, speed = scenario.ego.accel.advance(world.ego_odometer_m, world.ego_speed_mps, t0, dt)
    return replace(world, sim_time_s=t1, ego_speed_mps=speed, ego_odometer_m=odo,
                   vehicles=tuple(vehicles))


def render_detections(world: WorldState, camera: CameraModel, noise: NoiseSpec,
                      rng: np.random.Generator, frame_index: int = 0) -> DetectionFrame:
    """Project every visible vehicle, perturb, drop misses and add clutter."""
    detections = []
    sigma = noise.box_edge_sigma_px
    for v in world.vehicles:
        if not v.visible or v.d_y <= 0:
            continue
        box = project_vehicle(camera, (v.d_x, v.d_y), v.width_m, v.height_m)
        if box is None:
            continue
        if noise.miss_rate > 0 and rng.random() < noise.miss_rate:
            continue
        if sigma > 0:
            edges = np.array(box.as_ltrb()) + rng.normal(0.0, sigma, 4)
            if edges[0] >= edges[2] or edges[1] >= edges[3]:
                continue
            box = BoundingBox(*(float(e) for e in edges))
        clipped = box.clip_to_image(camera)
        if clipped is None:
            continue
        score = 0.9 if sigma == 0 else float(rng.uniform(0.6, 1.0))
        detections.append(Detection(clipped, "car", score))
    if noise.clutter_rate > 0:
        scale = camera.image_width_px / 1920.0
        for _ in range(rng.poisson(noise.clutter_rate)):
            w = rng.uniform(30, 250) * scale
            h = w * rng.uniform(0.6, 1.2)
            col = rng.uniform(0, camera.image_width_px)
            row = rng.uniform(0, camera.image_height_px)
            clipped = BoundingBox.from_center(col, row, w, h).clip_to_image(camera)
            if clipped is not None:
                detections.append(Detection(clipped, "car", float(rng.uniform(0.0, 1.0))))
    return DetectionFrame(frame_index, world.sim_time_s, tuple(detections))


def marking_covered(odometer_m: float, marking: LaneMarkingSpec, side: str = "left") -> bool:
    return (odometer_m + marking.side_phase(side)) % marking.period_m < marking.marking_length_m


def render_marking_pulse(world: WorldState, marking: LaneMarkingSpec) -> Tuple[bool, bool]:
    """Whether a marking covers the fixed reference point on the (left, right) line."""
    return (marking_covered(world.ego_odometer_m, marking, "left"),
            marking_covered(world.ego_odometer_m, marking, "right"))


def gps_fix(world: WorldState) -> Tuple[float, float, float]:
    """Fix for an ego driving due north from ``GPS_ORIGIN`` along a meridian."""
    lat = GPS_ORIGIN[0] + math.degrees(world.ego_odometer_m / 6371000.0)
    return (world.sim_time_s, lat, GPS_ORIGIN[1])


@dataclass(frozen=True)
class SimFrame:
    world: WorldState
    detections: DetectionFrame
    pulse: PulseSample
    gps: Optional[Tuple[float, float, float]] = None


def simulate(scenario: Scenario) -> Iterator[SimFrame]:
    """Yield one frame per camera tick; deterministic given the noise seed."""
    rng = np.random.default_rng(scenario.noise.seed)
    gps_dt = 1.0 / scenario.gps_rate_hz if scenario.gps_rate_hz > 0 else None
    next_gps = 0.0
    world = scenario.initial_world()
    for k in range(scenario.frame_count):
        if k > 0:
            # step to the exact tick time so timestamps do not accumulate rounding
            t_k = k / scenario.frame_rate_hz
            world = replace(step_world(world, t_k - world.sim_time_s, scenario), sim_time_s=t_k)
        frame = render_detections(world, scenario.camera, scenario.noise, rng, k)
        left, right = render_marking_pulse(world, scenario.marking)
        fix = None
        if gps_dt is not None and world.sim_time_s >= next_gps - 1e-9:
            fix = gps_fix(world)
            next_gps += gps_dt
        yield SimFrame(world, frame, PulseSample(world.sim_time_s, left, right), fix)


def world_to_record(world: WorldState) -> dict:
    return {
        "time_s": float(world.sim_time_s),
        "ego": {"speed": float(world.ego_speed_mps), "lane": int(world.ego_lane_index),
                "odometer": float(world.ego_odometer_m)},
        "lane_width": float(world.lane_width_m),
        "vehicles": [
            {"id": v.id, "d_x": float(v.d_x), "d_y": float(v.d_y), "v_x": float(v.v_x),
             "v_y": float(v.v_y), "width": float(v.width_m), "length": float(v.length_m),
             "height": float(v.height_m), "visible": bool(v.visible)}
            for v in world.vehicles
        ],
    }


def record_to_world(rec: dict) -> WorldState:
    ego = rec["ego"]
    return WorldState(
        sim_time_s=float(rec["time_s"]),
        ego_speed_mps=float(ego["speed"]),
        ego_lane_index=int(ego["lane"]),
        ego_odometer_m=float(ego["odometer"]),
        lane_width_m=float(rec["lane_width"]),
        vehicles=tuple(
            VehicleTruth(int(v["id"]), float(v["d_x"]), float(v["d_y"]), float(v["v_x"]),
                         float(v["v_y"]), float(v["width"]), float(v["length"]),
                         float(v["height"]), bool(v["visible"]))
            for v in rec["vehicles"]),
    )


def write_ground_truth(trajectory: Sequence[WorldState]) -> bytes:
    trajectory = list(trajectory)
    for a, b in zip(trajectory, trajectory[1:]):
        if not b.sim_time_s > a.sim_time_s:
            raise ScenarioError(f"ground truth times not increasing at {b.sim_time_s}")
    return "".join(dumps_record(world_to_record(w)) + "\n" for w in trajectory).encode("utf-8")


def read_ground_truth(source) -> Iterator[WorldState]:
    last = None
    for lineno, rec in iter_records(source, ScenarioError):
        try:
            world = record_to_world(rec)
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"line {lineno}: bad ground-truth record: {exc}") from None
        if last is not None and not world.sim_time_s > last:
            raise ScenarioError(f"line {lineno}: time_s not increasing")
        last = world.sim_time_s
        yield world


# scenario files ---------------------------------------------------------

def _vehicle_from_dict(d: dict) -> VehicleScript:
    d = dict(d)
    accel = AccelProfile.from_pairs(d.pop("accel", ()))
    lane_changes = tuple(LaneChange(float(lc["start_s"]), float(lc["duration_s"]),
                                    float(lc["delta_m"])) for lc in d.pop("lane_changes", ()))
    hidden = tuple((float(a), float(b)) for a, b in d.pop("hidden", ()))
    return VehicleScript(accel=accel, lane_changes=lane_changes, hidden=hidden, **d)


def scenario_from_dict(data: dict, base_dir: Path | None = None) -> Scenario:
    """Build a scenario from parsed config; ``camera`` may be a mapping or a file path."""
    try:
        data = dict(data)
        cam = data.pop("camera")
        if isinstance(cam, (str, Path)):
            path = Path(cam)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            camera = load_camera(path)
        else:
            camera = CameraModel.from_dict(cam)
        ego = data.pop("ego", {}) or {}
        ego = EgoScript(float(ego.get("speed_mps", 20.0)), int(ego.get("lane_index", 0)),
                        AccelProfile.from_pairs(ego.get("accel", ())))
        vehicles = tuple(_vehicle_from_dict(v) for v in data.pop("vehicles", ()) or ())
        marking = LaneMarkingSpec(**(data.pop("marking", {}) or {}))
        noise = NoiseSpec(**(data.pop("noise", {}) or {}))
        return Scenario(camera=camera, vehicles=vehicles, ego=ego, marking=marking,
                        noise=noise, **data)
    except ScenarioError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"bad scenario: {exc}") from None


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ScenarioError(f"{path}: scenario must be a mapping")
    return scenario_from_dict(data, path.parent)


def collect(frames: Iterator[SimFrame]) -> Dict[str, List]:
    """Split a simulation into its detection, pulse, GPS and ground-truth channels."""
    out: Dict[str, List] = {"detections": [], "pulses": [], "gps": [], "truth": []}
    for f in frames:
        out["detections"].append(f.detections)
        out["pulses"].append(f.pulse)
        out["truth"].append(f.world)
        if f.gps is not None:
            out["gps"].append(f.gps)
    return out
