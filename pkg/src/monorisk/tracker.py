"""Particle-filter multi-object tracker.

Each object keeps N particles over box state ``(col, row, width, height)``.
A frame runs predict (drift by the last inter-frame box displacement plus
Gaussian motion noise), update (importance weights from a Gaussian perception
model around the matched detection) and systematic resampling. The bank
handles association, confirmation, occlusion coasting and ID bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .detection_io import DetectionFrame
from .geometry import BoundingBox

TENTATIVE = "tentative"
CONFIRMED = "confirmed"
OCCLUDED = "occluded"

# exp() underflows to 0 below this log-weight
_LOG_UNDERFLOW = np.log(np.finfo(float).tiny)


class TrackerError(ValueError):
    pass


@dataclass(frozen=True)
class TrackerConfig:
    n_particles: int = 200
    motion_sigma_px: Tuple[float, float, float, float] = (8.0, 4.0, 2.0, 2.0)
    motion_reference_width_px: float = 1920.0
    observation_sigma_px: Tuple[float, float, float, float] = (5.0, 5.0, 5.0, 5.0)
    iou_gate: float = 0.2
    min_hits: int = 2
    max_occlusion: int = 8
    score_threshold: float = 0.5

    def __post_init__(self):
        if self.n_particles < 1:
            raise TrackerError("n_particles must be >= 1")
        if any(s < 0 for s in self.motion_sigma_px):
            raise TrackerError("motion sigmas must be >= 0")
        if any(s < 0 for s in self.observation_sigma_px):
            raise TrackerError("observation sigmas must be >= 0")
        if self.min_hits < 1 or self.max_occlusion < 0:
            raise TrackerError("min_hits must be >= 1 and max_occlusion >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "TrackerConfig":
        data = dict(data or {})
        for key in ("motion_sigma_px", "observation_sigma_px"):
            if key in data:
                value = data[key]
                data[key] = tuple(float(v) for v in (value if isinstance(value, (list, tuple))
                                                     else [value] * 4))
        return cls(**data)

    def motion_sigma_for(self, image_width_px: float) -> np.ndarray:
        """Motion noise scaled linearly with image width (defaults are for 1080p)."""
        scale = image_width_px / self.motion_reference_width_px
        return np.asarray(self.motion_sigma_px, dtype=float) * scale


@dataclass
class ObjectTracker:
    object_id: int
    particles: np.ndarray          # (N, 4): col, row, width, height
    weights: np.ndarray            # (N,)
    last_detection: BoundingBox
    motion_sigma: np.ndarray
    observation_sigma: np.ndarray
    last_displacement: np.ndarray = field(default_factory=lambda: np.zeros(4))
    frames_since_seen: int = 0
    hits: int = 1
    state: str = TENTATIVE

    @classmethod
    def spawn(cls, object_id: int, box: BoundingBox, n: int, motion_sigma, observation_sigma,
              rng: np.random.Generator) -> "ObjectTracker":
        motion_sigma = np.asarray(motion_sigma, dtype=float)
        return cls(object_id, _particles_around(box, n, motion_sigma, rng), np.full(n, 1.0 / n),
                   box, motion_sigma, np.asarray(observation_sigma, dtype=float))

    @property
    def n(self) -> int:
        return len(self.weights)

    def mean_state(self) -> np.ndarray:
        return self.weights @ self.particles

    def mean_box(self) -> BoundingBox:
        col, row, w, h = (float(v) for v in self.mean_state())
        return BoundingBox.from_center(col, row, w, h)


def _particles_around(box: BoundingBox, n: int, sigma: np.ndarray,
                      rng: np.random.Generator) -> np.ndarray:
    center = np.array(box.as_cxcywh(), dtype=float)
    particles = np.tile(center, (n, 1))
    if np.any(sigma > 0):
        particles += rng.normal(0.0, 1.0, (n, 4)) * sigma
    _clamp_sizes(particles)
    return particles


def _clamp_sizes(particles: np.ndarray) -> None:
    np.maximum(particles[:, 2:], 1.0, out=particles[:, 2:])


def predict(tracker: ObjectTracker, rng: np.random.Generator) -> np.ndarray:
    """Motion model: shift by the last displacement and add Gaussian noise; weights unchanged."""
    particles = tracker.particles + tracker.last_displacement
    if np.any(tracker.motion_sigma > 0):
        particles += rng.normal(0.0, 1.0, particles.shape) * tracker.motion_sigma
    _clamp_sizes(particles)
    tracker.particles = particles
    return particles


def update(tracker: ObjectTracker, matched: BoundingBox,
           rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Perception model: reweight particles by a Gaussian likelihood of the matched box.

    If every weight underflows, the particles are re-drawn around the box.
    A zero observation sigma makes the likelihood a delta in that dimension.
    """
    z = np.array(matched.as_cxcywh(), dtype=float)
    sigma = tracker.observation_sigma
    diff = tracker.particles - z
    if np.all(sigma > 0):
        resid = diff / sigma
    else:
        # zero sigma is a delta likelihood: any mismatch in that dimension has weight 0
        with np.errstate(divide="ignore", invalid="ignore"):
            resid = np.where(sigma > 0, diff / np.where(sigma > 0, sigma, 1.0),
                             np.where(diff == 0, 0.0, np.inf))
    log_w = -0.5 * np.einsum("ij,ij->i", resid, resid)
    with np.errstate(divide="ignore"):
        log_w = log_w + np.log(tracker.weights)
    peak = log_w.max()
    if not np.isfinite(peak) or peak < _LOG_UNDERFLOW:
        if rng is None:
            rng = np.random.default_rng(tracker.object_id)
        tracker.particles = _particles_around(matched, tracker.n, tracker.motion_sigma, rng)
        tracker.weights = np.full(tracker.n, 1.0 / tracker.n)
        return tracker.weights
    w = np.exp(log_w - peak)
    tracker.weights = w / w.sum()
    return tracker.weights


def systematic_indices(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(weights)
    positions = (rng.random() + np.arange(n)) / n
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    return np.minimum(np.searchsorted(cumulative, positions, side="right"), n - 1)


def resample(tracker: ObjectTracker, rng: np.random.Generator) -> np.ndarray:
    """Systematic (low-variance) resampling to an equally weighted set."""
    idx = systematic_indices(tracker.weights, rng)
    tracker.particles = tracker.particles[idx]
    tracker.weights = np.full(tracker.n, 1.0 / tracker.n)
    return tracker.particles


@dataclass
class Association:
    matches: List[Tuple[int, int]]          # (object_id, detection index)
    unmatched_detections: List[int]
    unmatched_trackers: List[int]


def iou_matrix(a: Sequence[BoundingBox], b: Sequence[BoundingBox]) -> np.ndarray:
    if not a or not b:
        return np.zeros((len(a), len(b)))
    A = np.array([x.as_ltrb() for x in a])[:, None, :]
    B = np.array([x.as_ltrb() for x in b])[None, :, :]
    iw = np.clip(np.minimum(A[..., 2], B[..., 2]) - np.maximum(A[..., 0], B[..., 0]), 0, None)
    ih = np.clip(np.minimum(A[..., 3], B[..., 3]) - np.maximum(A[..., 1], B[..., 1]), 0, None)
    inter = iw * ih
    area_a = (A[..., 2] - A[..., 0]) * (A[..., 3] - A[..., 1])
    area_b = (B[..., 2] - B[..., 0]) * (B[..., 3] - B[..., 1])
    return inter / (area_a + area_b - inter)


def greedy_match(scores: np.ndarray, gate: float) -> List[Tuple[int, int]]:
    """One-to-one pairs (row, col) taken in descending score order, ignoring scores below ``gate``."""
    rows, cols = np.nonzero(scores >= gate)
    order = sorted(zip(-scores[rows, cols], rows, cols))
    used_r, used_c, pairs = set(), set(), []
    for _, r, c in order:
        if r in used_r or c in used_c:
            continue
        used_r.add(r)
        used_c.add(c)
        pairs.append((int(r), int(c)))
    return pairs


def associate(predicted: Dict[int, BoundingBox], boxes: Sequence[BoundingBox],
              gate: float = 0.2) -> Association:
    """Greedy IoU matching between predicted tracker boxes and detection boxes."""
    ids = sorted(predicted)
    scores = iou_matrix([predicted[i] for i in ids], list(boxes))
    pairs = greedy_match(scores, gate)
    matched_t = {r for r, _ in pairs}
    matched_d = {c for _, c in pairs}
    return Association(
        matches=sorted((ids[r], c) for r, c in pairs),
        unmatched_detections=[d for d in range(len(boxes)) if d not in matched_d],
        unmatched_trackers=[ids[r] for r in range(len(ids)) if r not in matched_t],
    )


@dataclass(frozen=True)
class TrackedBox:
    box: BoundingBox
    coasted: bool = False
    frames_since_seen: int = 0


class TrackerBank:
    """All object trackers for one stream.

    ``step`` returns confirmed tracks only; tracks coasting through an
    occlusion are included with ``coasted=True``.
    """

    def __init__(self, config: TrackerConfig = TrackerConfig(), image_width_px: float = 1920.0,
                 seed: int = 0):
        self.config = config
        self.motion_sigma = config.motion_sigma_for(image_width_px)
        self.observation_sigma = np.asarray(config.observation_sigma_px, dtype=float)
        self.trackers: Dict[int, ObjectTracker] = {}
        self.next_id = 0
        self.last_time: Optional[float] = None
        self.rng = np.random.default_rng(seed)

    def predicted_boxes(self) -> Dict[int, BoundingBox]:
        return {i: t.mean_box() for i, t in self.trackers.items()}

    def step(self, frame: DetectionFrame) -> Dict[int, TrackedBox]:
        if self.last_time is not None and not frame.frame_time_s > self.last_time:
            raise TrackerError(f"frame at {frame.frame_time_s}s arrived after {self.last_time}s")
        self.last_time = frame.frame_time_s
        cfg = self.config
        boxes = [d.box for d in frame.detections if d.score >= cfg.score_threshold]

        for oid in sorted(self.trackers):
            predict(self.trackers[oid], self.rng)
        assoc = associate(self.predicted_boxes(), boxes, cfg.iou_gate)

        for oid, d in assoc.matches:
            trk = self.trackers[oid]
            box = boxes[d]
            gap = trk.frames_since_seen + 1
            trk.last_displacement = (np.array(box.as_cxcywh()) -
                                     np.array(trk.last_detection.as_cxcywh())) / gap
            trk.last_detection = box
            update(trk, box, self.rng)
            resample(trk, self.rng)
            trk.hits += 1
            trk.frames_since_seen = 0
            if trk.state == OCCLUDED or trk.hits >= cfg.min_hits:
                trk.state = CONFIRMED

        for oid in assoc.unmatched_trackers:
            trk = self.trackers[oid]
            trk.frames_since_seen += 1
            if trk.state == TENTATIVE or trk.frames_since_seen > cfg.max_occlusion:
                del self.trackers[oid]
            else:
                trk.state = OCCLUDED

        for d in assoc.unmatched_detections:
            oid = self.next_id
            self.next_id += 1
            trk = ObjectTracker.spawn(oid, boxes[d], cfg.n_particles, self.motion_sigma,
                                      self.observation_sigma, self.rng)
            if cfg.min_hits <= 1:
                trk.state = CONFIRMED
            self.trackers[oid] = trk

        return {oid: TrackedBox(t.mean_box(), t.state == OCCLUDED, t.frames_since_seen)
                for oid, t in sorted(self.trackers.items()) if t.state != TENTATIVE}
