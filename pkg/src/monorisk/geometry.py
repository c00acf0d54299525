"""Pinhole-camera geometry on a flat road.

Image convention: columns grow to the right, rows grow downward. World
convention (ego-relative): ``d_x`` lateral, positive to the right of the
camera axis; ``d_y`` longitudinal, positive ahead of the camera.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
import yaml


class GeometryError(ValueError):
    pass


class AtOrAboveHorizonError(GeometryError):
    """The box bottom does not lie below the horizon row."""


class NoVanishingPointError(GeometryError):
    pass


class BehindCameraError(GeometryError):
    pass


@dataclass(frozen=True)
class CameraModel:
    focal_length_px: float
    mount_height_m: float
    horizon_row_px: float
    principal_col_px: float
    image_width_px: int
    image_height_px: int
    assumed_vehicle_width_m: float = 1.8
    assumed_vehicle_length_m: float = 4.5

    def __post_init__(self):
        if not self.focal_length_px > 0:
            raise GeometryError(f"focal_length_px must be > 0, got {self.focal_length_px}")
        if not self.mount_height_m > 0:
            raise GeometryError(f"mount_height_m must be > 0, got {self.mount_height_m}")
        if not 0 <= self.horizon_row_px < self.image_height_px:
            raise GeometryError("horizon_row_px must lie inside the image")
        if not 0 <= self.principal_col_px < self.image_width_px:
            raise GeometryError("principal_col_px must lie inside the image")
        if not self.assumed_vehicle_width_m > 0:
            raise GeometryError("assumed_vehicle_width_m must be > 0")
        if not self.assumed_vehicle_length_m > 0:
            raise GeometryError("assumed_vehicle_length_m must be > 0")

    @classmethod
    def from_dict(cls, data: dict) -> "CameraModel":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise GeometryError(f"unknown camera fields: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise GeometryError(f"bad camera config: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)


def load_camera(path) -> CameraModel:
    """Load a camera configuration file (YAML or JSON)."""
    with open(Path(path), "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise GeometryError(f"{path}: camera config must be a mapping")
    return CameraModel.from_dict(data)


@dataclass(frozen=True)
class BoundingBox:
    left_px: float
    top_px: float
    right_px: float
    bottom_px: float

    def __post_init__(self):
        if not self.left_px < self.right_px:
            raise GeometryError(f"box needs left < right: {self}")
        if not self.top_px < self.bottom_px:
            raise GeometryError(f"box needs top < bottom: {self}")

    @classmethod
    def from_center(cls, col: float, row: float, width: float, height: float) -> "BoundingBox":
        return cls(col - width / 2, row - height / 2, col + width / 2, row + height / 2)

    @property
    def width(self) -> float:
        return self.right_px - self.left_px

    @property
    def height(self) -> float:
        return self.bottom_px - self.top_px

    @property
    def center(self) -> Tuple[float, float]:
        return ((self.left_px + self.right_px) / 2, (self.top_px + self.bottom_px) / 2)

    def as_cxcywh(self) -> Tuple[float, float, float, float]:
        col, row = self.center
        return (col, row, self.width, self.height)

    def as_ltrb(self) -> Tuple[float, float, float, float]:
        return (self.left_px, self.top_px, self.right_px, self.bottom_px)

    def intersects_image(self, camera: CameraModel) -> bool:
        return (self.right_px > 0 and self.left_px < camera.image_width_px
                and self.bottom_px > 0 and self.top_px < camera.image_height_px)

    def clip_to_image(self, camera: CameraModel) -> Optional["BoundingBox"]:
        left = max(self.left_px, 0.0)
        top = max(self.top_px, 0.0)
        right = min(self.right_px, float(camera.image_width_px))
        bottom = min(self.bottom_px, float(camera.image_height_px))
        if left >= right or top >= bottom:
            return None
        return BoundingBox(left, top, right, bottom)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.right_px, b.right_px) - max(a.left_px, b.left_px)
    ih = min(a.bottom_px, b.bottom_px) - max(a.top_px, b.top_px)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.width * a.height + b.width * b.height - inter)


def is_clipped(camera: CameraModel, box: BoundingBox) -> bool:
    """True when the bottom edge touches or crosses the lower image border.

    Such a box no longer shows where the vehicle meets the road, so the
    longitudinal distance read from it is unreliable.
    """
    return box.bottom_px >= camera.image_height_px


@dataclass(frozen=True)
class ImageLineSegment:
    endpoint_a: Tuple[float, float]
    endpoint_b: Tuple[float, float]

    def __post_init__(self):
        if tuple(self.endpoint_a) == tuple(self.endpoint_b):
            raise GeometryError("segment endpoints must be distinct")


def longitudinal_distance(camera: CameraModel, box: BoundingBox) -> float:
    """Distance ahead to the rear of the vehicle: ``h_c * F / d_b``."""
    d_b = box.bottom_px - camera.horizon_row_px
    if d_b <= 0:
        raise AtOrAboveHorizonError(
            f"box bottom {box.bottom_px} is not below horizon row {camera.horizon_row_px}")
    return camera.mount_height_m * camera.focal_length_px / d_b


def far_edge_offset(camera: CameraModel, box: BoundingBox) -> float:
    """Signed column offset of the box edge farthest from the principal column.

    Ties go to the right edge.
    """
    left = box.left_px - camera.principal_col_px
    right = box.right_px - camera.principal_col_px
    return left if abs(left) > abs(right) else right


def lateral_distance(camera: CameraModel, d_y: float, box: BoundingBox) -> float:
    """Signed lateral offset of the vehicle center.

    The far edge marks the rear corner farthest from the axis; half the assumed
    vehicle width is removed toward the axis to reach the center.
    """
    if not d_y > 0:
        raise GeometryError(f"d_y must be > 0, got {d_y}")
    d_e = far_edge_offset(camera, box)
    corner = d_y * abs(d_e) / camera.focal_length_px
    sign = -1.0 if d_e < 0 else 1.0
    return sign * (corner - camera.assumed_vehicle_width_m / 2)


def vanishing_point(lines: Sequence[ImageLineSegment]) -> Tuple[float, float]:
    """Least-squares intersection of the extended segments, as (col, row)."""
    if len(lines) < 2:
        raise NoVanishingPointError("need at least two segments")
    normals = []
    offsets = []
    for seg in lines:
        a = np.asarray(seg.endpoint_a, dtype=float)
        b = np.asarray(seg.endpoint_b, dtype=float)
        d = b - a
        n = np.array([-d[1], d[0]]) / np.hypot(d[0], d[1])
        normals.append(n)
        offsets.append(n @ a)
    A = np.array(normals)
    c = np.array(offsets)
    normal_matrix = A.T @ A
    # Smallest eigenvalue of sum(n n^T) is 0 iff all normals are parallel.
    eigvals = np.linalg.eigvalsh(normal_matrix)
    if eigvals[0] <= 1e-12 * max(eigvals[-1], 1.0):
        raise NoVanishingPointError("all segments are parallel in the image")
    point = np.linalg.solve(normal_matrix, A.T @ c)
    return (float(point[0]), float(point[1]))


def project_vehicle(camera: CameraModel, rear_center: Tuple[float, float],
                    width_m: float, height_m: float) -> Optional[BoundingBox]:
    """Project the rear face of a vehicle to its image box.

    Returns None when the box lies entirely outside the image. Coordinates are
    not clipped.
    """
    d_x, d_y = rear_center
    if not d_y > 0:
        raise BehindCameraError(f"vehicle at d_y={d_y} is not in front of the camera")
    f = camera.focal_length_px
    bottom = camera.horizon_row_px + camera.mount_height_m * f / d_y
    top = camera.horizon_row_px + (camera.mount_height_m - height_m) * f / d_y
    left = camera.principal_col_px + (d_x - width_m / 2) * f / d_y
    right = camera.principal_col_px + (d_x + width_m / 2) * f / d_y
    box = BoundingBox(left, top, right, bottom)
    if not box.intersects_image(camera):
        return None
    return box


def ground_point_to_pixel(camera: CameraModel, d_x: float, d_y: float) -> Tuple[float, float]:
    """Image (col, row) of a point on the road surface."""
    if not d_y > 0:
        raise BehindCameraError(f"point at d_y={d_y} is not in front of the camera")
    f = camera.focal_length_px
    return (camera.principal_col_px + d_x * f / d_y,
            camera.horizon_row_px + camera.mount_height_m * f / d_y)


def lane_line_segments(camera: CameraModel, lateral_offsets: Iterable[float],
                       near_m: float = 6.0, far_m: float = 40.0):
    """Image segments of straight road lines at the given lateral offsets."""
    return [ImageLineSegment(ground_point_to_pixel(camera, x, near_m),
                             ground_point_to_pixel(camera, x, far_m))
            for x in lateral_offsets]


def horizon_from_lines(camera: CameraModel, lines: Sequence[ImageLineSegment]) -> CameraModel:
    """Return a copy of ``camera`` whose horizon row comes from the vanishing point."""
    _, row = vanishing_point(lines)
    if not math.isfinite(row):
        raise NoVanishingPointError("vanishing point is not finite")
    data = camera.to_dict()
    data["horizon_row_px"] = row
    return CameraModel(**data)
