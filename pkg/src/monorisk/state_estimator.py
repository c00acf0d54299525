"""Relative distance and velocity of tracked vehicles from their image boxes."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .geometry import (AtOrAboveHorizonError, BoundingBox, CameraModel, is_clipped,
                       lateral_distance, longitudinal_distance)


class StateError(ValueError):
    pass


@dataclass(frozen=True)
class VehicleState:
    d_x: float
    d_y: float
    v_x: float = 0.0
    v_y: float = 0.0
    age_s: float = 0.0
    coasted: bool = False
    stale: bool = False


class ObjectHistory:
    """Bounded ring buffer of ``(time_s, d_x, d_y)`` samples, oldest evicted first."""

    def __init__(self, capacity: int = 30):
        if capacity < 1:
            raise StateError("history capacity must be >= 1")
        self.samples: deque = deque(maxlen=capacity)
        self.first_time_s: Optional[float] = None

    def __len__(self):
        return len(self.samples)

    @property
    def capacity(self) -> int:
        return self.samples.maxlen

    @property
    def last_time_s(self) -> Optional[float]:
        return self.samples[-1][0] if self.samples else None

    def append(self, time_s: float, d_x: float, d_y: float) -> None:
        if self.samples and not time_s > self.samples[-1][0]:
            raise StateError(f"history time {time_s} is not after {self.samples[-1][0]}")
        if self.first_time_s is None:
            self.first_time_s = time_s
        self.samples.append((time_s, d_x, d_y))


def relative_velocity(history: ObjectHistory, window: int = 5) -> Tuple[float, float]:
    """Least-squares slope of ``d_x`` and ``d_y`` against time over the newest samples."""
    k = min(window, len(history))
    if k < 2:
        return (0.0, 0.0)
    recent = np.array(list(history.samples)[-k:])
    t = recent[:, 0] - recent[:, 0].mean()
    denom = t @ t
    dx = recent[:, 1] - recent[:, 1].mean()
    dy = recent[:, 2] - recent[:, 2].mean()
    return (float(t @ dx / denom), float(t @ dy / denom))


def estimate_state(camera: CameraModel, box: BoundingBox, frame_time_s: float,
                   history: ObjectHistory, window: int = 5) -> VehicleState:
    """Measure distance from ``box``, fold it into ``history`` and return the new state.

    Raises AtOrAboveHorizonError without touching the history when the box
    bottom is not below the horizon.
    """
    d_y = longitudinal_distance(camera, box)
    d_x = lateral_distance(camera, d_y, box)
    history.append(frame_time_s, d_x, d_y)
    v_x, v_y = relative_velocity(history, window)
    return VehicleState(d_x, d_y, v_x, v_y, frame_time_s - history.first_time_s)


@dataclass(frozen=True)
class StateConfig:
    velocity_window: int = 5
    history_capacity: int = 30
    stale_after_s: float = 1.0

    @classmethod
    def from_dict(cls, data: dict) -> "StateConfig":
        return cls(**(data or {}))


class StateEstimator:
    """Per-object histories and last states for one stream.

    Coasting tracks get a constant-velocity extrapolation flagged ``coasted``
    that never enters the history. Boxes whose bottom edge is clipped by the
    image border, or that sit at/above the horizon, leave the last state in
    place; it is flagged ``stale`` once older than ``stale_after_s``.
    """

    def __init__(self, camera: CameraModel, config: StateConfig = StateConfig()):
        self.camera = camera
        self.config = config
        self.histories: Dict[int, ObjectHistory] = {}
        self.last_state: Dict[int, VehicleState] = {}
        self.last_update_s: Dict[int, float] = {}

    def update(self, tracked: Mapping, frame_time_s: float) -> Dict[int, VehicleState]:
        """``tracked`` maps object id to a TrackedBox (or a plain BoundingBox)."""
        for oid in list(self.histories):
            if oid not in tracked:
                del self.histories[oid]
                self.last_state.pop(oid, None)
                self.last_update_s.pop(oid, None)
        out: Dict[int, VehicleState] = {}
        for oid in sorted(tracked):
            item = tracked[oid]
            box = getattr(item, "box", item)
            coasted = bool(getattr(item, "coasted", False))
            state = self._one(oid, box, coasted, frame_time_s)
            if state is not None:
                out[oid] = state
        return out

    def _one(self, oid: int, box: BoundingBox, coasted: bool, t: float) -> Optional[VehicleState]:
        history = self.histories.setdefault(oid, ObjectHistory(self.config.history_capacity))
        last = self.last_state.get(oid)
        if not coasted and not is_clipped(self.camera, box):
            try:
                state = estimate_state(self.camera, box, t, history, self.config.velocity_window)
            except AtOrAboveHorizonError:
                pass
            else:
                self.last_state[oid] = state
                self.last_update_s[oid] = t
                return state
        if last is None:
            return None
        since = t - self.last_update_s[oid]
        age = t - history.first_time_s
        if coasted:
            return replace(last, d_x=last.d_x + last.v_x * since, d_y=last.d_y + last.v_y * since,
                           age_s=age, coasted=True, stale=since > self.config.stale_after_s)
        return replace(last, age_s=age, stale=since > self.config.stale_after_s)
