"""Ego speed from lane-marking timing, with a GPS fallback.

A fixed reference point on each side of the lane sees dashed markings sweep
past. The time between two consecutive rising edges (uncovered -> covered)
is the time to travel one marking period, so speed = period / dt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple

from .detection_io import dumps_record, iter_records

EARTH_RADIUS_M = 6371000.0


class PulseLogError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class LaneMarkingSpec:
    """Dashed lane-marking geometry; the US defaults are 10 ft dashes with 30 ft gaps.

    ``right_phase_m`` lets the right-hand line be staggered against the left;
    None means both lines share ``phase_m``.
    """

    marking_length_m: float = 3.05
    gap_length_m: float = 9.14
    phase_m: float = 0.0
    right_phase_m: Optional[float] = None

    def __post_init__(self):
        if not self.marking_length_m > 0:
            raise ValueError("marking_length_m must be > 0")
        if not self.gap_length_m > 0:
            raise ValueError("gap_length_m must be > 0")

    @property
    def period_m(self) -> float:
        return self.marking_length_m + self.gap_length_m

    def side_phase(self, side: str) -> float:
        if side == "right" and self.right_phase_m is not None:
            return self.right_phase_m
        return self.phase_m


@dataclass(frozen=True)
class PulseSample:
    frame_time_s: float
    left_covered: bool
    right_covered: bool


@dataclass(frozen=True)
class SpeedEstimate:
    speed_mps: float
    source: str
    confidence_window_s: float
    time_s: float = 0.0

    def __post_init__(self):
        if not self.speed_mps >= 0:
            raise ValueError(f"speed must be >= 0, got {self.speed_mps}")
        if self.source not in ("lane", "gps"):
            raise ValueError(f"unknown speed source {self.source!r}")


class _SideEdges:
    __slots__ = ("covered", "last_rise", "latest")

    def __init__(self):
        self.covered: Optional[bool] = None
        self.last_rise: Optional[float] = None
        self.latest: Optional[float] = None

    def observe(self, t: float, covered: bool, period_m: float) -> Optional[float]:
        measurement = None
        if self.covered is False and covered:
            if self.last_rise is not None:
                measurement = period_m / (t - self.last_rise)
            self.last_rise = t
        self.covered = covered
        return measurement


class LaneSpeedEstimator:
    """Streaming speed estimate from left/right marking pulses.

    Per-side period speeds feed one exponential moving average. A new
    measurement is discarded when it disagrees with the other side's latest
    value by more than ``max_disagreement`` (relative), as happens while
    crossing a line during a lane change.
    """

    def __init__(self, marking: LaneMarkingSpec, smoothing: float = 0.3,
                 max_disagreement: float = 0.25):
        if not 0 < smoothing <= 1:
            raise ValueError("smoothing must be in (0, 1]")
        self.marking = marking
        self.smoothing = smoothing
        self.max_disagreement = max_disagreement
        self.sides = {"left": _SideEdges(), "right": _SideEdges()}
        self.ema: Optional[float] = None
        self.first_support_time: Optional[float] = None
        self.last_time: Optional[float] = None

    def update(self, sample: PulseSample) -> Optional[SpeedEstimate]:
        t = sample.frame_time_s
        if self.last_time is not None and not t > self.last_time:
            raise PulseLogError(f"pulse time {t} is not after {self.last_time}")
        self.last_time = t
        period = self.marking.period_m
        fresh = []
        for name, covered in (("left", sample.left_covered), ("right", sample.right_covered)):
            speed = self.sides[name].observe(t, bool(covered), period)
            if speed is not None:
                self.sides[name].latest = speed
                fresh.append((name, speed))
        # compare after both sides update so simultaneous edges are judged symmetrically
        for name, speed in fresh:
            other = self.sides["right" if name == "left" else "left"].latest
            if other is not None and abs(speed - other) > self.max_disagreement * other:
                continue
            if self.ema is None:
                self.ema = speed
                # the rising edge that opened this period
                self.first_support_time = t - period / speed
            else:
                self.ema = self.smoothing * speed + (1 - self.smoothing) * self.ema
        return self.current(t)

    def current(self, t: float) -> Optional[SpeedEstimate]:
        if self.ema is None or any(s.latest is None for s in self.sides.values()):
            return None
        return SpeedEstimate(self.ema, "lane", t - self.first_support_time, t)


def update_pulse(estimator: LaneSpeedEstimator, sample: PulseSample) -> Optional[SpeedEstimate]:
    return estimator.update(sample)


def haversine_m(lat1: float, lon1: float, lat2: float, lon2: float,
                radius_m: float = EARTH_RADIUS_M) -> float:
    phi1, phi2 = math.radians(lat1), math.radians(lat2)
    dphi = phi2 - phi1
    dlam = math.radians(lon2 - lon1)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    return 2 * radius_m * math.asin(min(1.0, math.sqrt(h)))


def gps_speed(entries: Sequence[Tuple[float, float, float]],
              radius_m: float = EARTH_RADIUS_M) -> List[SpeedEstimate]:
    """Speed between consecutive ``(time_s, lat, lon)`` fixes; pairs with equal times are skipped."""
    entries = list(entries)
    if len(entries) < 2:
        raise ValueError("gps_speed needs at least two fixes")
    out = []
    for (t0, lat0, lon0), (t1, lat1, lon1) in zip(entries, entries[1:]):
        if t1 < t0:
            raise ValueError(f"GPS fixes out of order at t={t1}")
        if t1 == t0:
            continue
        dist = haversine_m(lat0, lon0, lat1, lon1, radius_m)
        out.append(SpeedEstimate(dist / (t1 - t0), "gps", t1 - t0, t1))
    return out


def read_pulse_log(source) -> Iterator[PulseSample]:
    last = None
    for lineno, rec in iter_records(source, PulseLogError):
        try:
            sample = PulseSample(float(rec["time_s"]), _as_bool(rec["left"]), _as_bool(rec["right"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise PulseLogError(f"bad pulse record: {exc}", lineno) from None
        if last is not None and not sample.frame_time_s > last:
            raise PulseLogError(f"time_s {sample.frame_time_s} not after {last}", lineno)
        last = sample.frame_time_s
        yield sample


def _as_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    raise TypeError(f"expected boolean, got {value!r}")


def write_pulse_log(samples: Iterable[PulseSample]) -> bytes:
    return "".join(
        dumps_record({"time_s": float(s.frame_time_s), "left": bool(s.left_covered),
                      "right": bool(s.right_covered)}) + "\n"
        for s in samples).encode("utf-8")


def read_gps_log(source) -> List[Tuple[float, float, float]]:
    fixes = []
    for lineno, rec in iter_records(source, PulseLogError):
        try:
            fixes.append((float(rec["time_s"]), float(rec["lat"]), float(rec["lon"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise PulseLogError(f"bad GPS record: {exc}", lineno) from None
    return fixes


def write_gps_log(fixes: Iterable[Tuple[float, float, float]]) -> bytes:
    return "".join(dumps_record({"time_s": float(t), "lat": float(lat), "lon": float(lon)}) + "\n"
                   for t, lat, lon in fixes).encode("utf-8")


class GpsSpeedSource:
    """Latest GPS speed at or before a query time."""

    def __init__(self, fixes: Sequence[Tuple[float, float, float]]):
        self.estimates = gps_speed(fixes) if len(fixes) >= 2 else []
        self._i = 0
        self._current: Optional[SpeedEstimate] = None

    def at(self, t: float) -> Optional[SpeedEstimate]:
        while self._i < len(self.estimates) and self.estimates[self._i].time_s <= t:
            self._current = self.estimates[self._i]
            self._i += 1
        return self._current
