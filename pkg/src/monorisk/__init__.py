"""Monocular vehicle tracking, distance estimation and collision-risk scoring."""

from .geometry import BoundingBox, CameraModel
from .pipeline import PipelineConfig, load_config, run

__all__ = ["BoundingBox", "CameraModel", "PipelineConfig", "load_config", "run"]
__version__ = "0.1.0"
