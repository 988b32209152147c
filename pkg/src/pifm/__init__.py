"""Multi-parameter flow matching with path-independence checks and barycenter oracles."""
from __future__ import annotations

__version__ = "0.1.0"

from .errors import CheckpointError, ParameterError, TrainingError
from .geometry import PointCloud, ShapeSpec, apply_map, empirical_moments, sample_shape
from .rng import RngStream

__all__ = [
    "CheckpointError", "ParameterError", "PointCloud", "RngStream", "ShapeSpec", "TrainingError",
    "__version__", "apply_map", "empirical_moments", "sample_shape",
]
