"""Line-delimited detection streams.

One JSON object per line::

    {"frame": 0, "time_s": 0.0, "boxes": [{"l": .., "t": .., "r": .., "b": .., "label": "car", "score": 0.9}]}
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import IO, AbstractSet, Iterable, Iterator, Tuple, Union

from .geometry import BoundingBox


class DetectionStreamError(ValueError):
    """Malformed or out-of-order detection stream."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_label: str
    score: float

    def __post_init__(self):
        if not self.class_label:
            raise DetectionStreamError("class_label must be nonempty")
        if not 0.0 <= self.score <= 1.0:
            raise DetectionStreamError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class DetectionFrame:
    frame_index: int
    frame_time_s: float
    detections: Tuple[Detection, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not math.isfinite(self.frame_time_s):
            raise DetectionStreamError(f"frame_time_s must be finite, got {self.frame_time_s}")
        if not isinstance(self.detections, tuple):
            object.__setattr__(self, "detections", tuple(self.detections))


def frame_to_record(frame: DetectionFrame) -> dict:
    return {
        "frame": int(frame.frame_index),
        "time_s": float(frame.frame_time_s),
        "boxes": [
            {"l": float(d.box.left_px), "t": float(d.box.top_px),
             "r": float(d.box.right_px), "b": float(d.box.bottom_px),
             "label": d.class_label, "score": float(d.score)}
            for d in frame.detections
        ],
    }


def record_to_frame(record: dict) -> DetectionFrame:
    try:
        boxes = record["boxes"]
        detections = tuple(
            Detection(BoundingBox(float(b["l"]), float(b["t"]), float(b["r"]), float(b["b"])),
                      str(b["label"]), float(b["score"]))
            for b in boxes
        )
        frame_index = record["frame"]
        if not isinstance(frame_index, int) or isinstance(frame_index, bool):
            raise DetectionStreamError(f"frame must be an integer, got {frame_index!r}")
        return DetectionFrame(frame_index, float(record["time_s"]), detections)
    except KeyError as exc:
        raise DetectionStreamError(f"missing field {exc}") from None
    except DetectionStreamError:
        raise
    except (TypeError, ValueError) as exc:  # includes GeometryError
        raise DetectionStreamError(str(exc)) from None


def dumps_record(record: dict) -> str:
    return json.dumps(record, separators=(",", ":"), allow_nan=False)


def iter_lines(source: Union[bytes, str, IO, Iterable]) -> Iterator[str]:
    """Yield text lines from bytes, a str, a binary/text file, or an iterable of lines."""
    if isinstance(source, bytes):
        source = io.BytesIO(source)
    elif isinstance(source, str):
        source = io.StringIO(source)
    for raw in source:
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
        yield raw


def iter_records(source, error_cls=DetectionStreamError) -> Iterator[Tuple[int, dict]]:
    """Parse JSON lines lazily, yielding ``(line_number, record)``; blank lines are skipped."""
    for lineno, line in enumerate(iter_lines(source), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise error_cls(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(record, dict):
            raise error_cls("record must be an object", lineno)
        yield lineno, record


def read_detection_stream(source) -> Iterator[DetectionFrame]:
    """Lazily parse a detection stream.

    Frames before a malformed record are still yielded; the error carries the
    offending line number.
    """
    last_time = None
    for lineno, record in iter_records(source):
        try:
            frame = record_to_frame(record)
        except DetectionStreamError as exc:
            raise DetectionStreamError(str(exc), lineno) from None
        if last_time is not None and not frame.frame_time_s > last_time:
            raise DetectionStreamError(
                f"time_s {frame.frame_time_s} is not after previous {last_time}", lineno)
        last_time = frame.frame_time_s
        yield frame


def validate_frames(frames: Iterable[DetectionFrame]) -> list:
    frames = list(frames)
    last_time = None
    for frame in frames:
        if last_time is not None and not frame.frame_time_s > last_time:
            raise DetectionStreamError(
                f"frame {frame.frame_index}: time_s {frame.frame_time_s} not after {last_time}")
        last_time = frame.frame_time_s
    return frames


def write_detection_stream(frames: Iterable[DetectionFrame]) -> bytes:
    """Serialize frames; the whole input is validated before any bytes are produced."""
    frames = validate_frames(frames)
    return "".join(dumps_record(frame_to_record(f)) + "\n" for f in frames).encode("utf-8")


def filter_vehicle_classes(frame: DetectionFrame, allowed: AbstractSet[str]) -> DetectionFrame:
    kept = tuple(d for d in frame.detections if d.class_label in allowed)
    return DetectionFrame(frame.frame_index, frame.frame_time_s, kept)
