"""Saliency-guided coarse-to-fine point cloud registration.

The pipeline builds a voxel hierarchy, describes points with handcrafted or
file-loaded features, optionally enhances superpoint features with geometric
attention, matches superpoints and then dense points, filters matches by
saliency, and estimates a rigid transform.
"""

from .config import PRESETS, PipelineConfig
from .errors import (
    DegenerateInputError,
    EstimationFailure,
    FormatError,
    ParameterError,
    RegistrationError,
)
from .geom import RigidTransform, build_hierarchy
from .pipeline import PipelineResult, run_pipeline
from .synth import SyntheticScene, synth_scene

__version__ = "0.1.0"

__all__ = [
    "PRESETS",
    "PipelineConfig",
    "PipelineResult",
    "RigidTransform",
    "SyntheticScene",
    "DegenerateInputError",
    "EstimationFailure",
    "FormatError",
    "ParameterError",
    "RegistrationError",
    "build_hierarchy",
    "run_pipeline",
    "synth_scene",
]
