"""Layered radiance-field avatars: a body layer plus separately trained clothing
layers, composed at render time and re-fitted to new bodies through a mesh
proxy."""

__version__ = "0.1.0"

from .errors import (CheckpointError, CheckpointVersionError, ConfigError, GuidanceError,
                     LayervolError, MissingPrerequisiteError, ParameterCorruptionError,
                     SceneSpecError)
from .fields import AnalyticField, LayerField
from .render import (CameraPose, SHLighting, generate_rays, orbit_camera, render_fused,
                     render_image, render_single_layer)

__all__ = [
    "AnalyticField", "CameraPose", "CheckpointError", "CheckpointVersionError", "ConfigError",
    "GuidanceError", "LayerField", "LayervolError", "MissingPrerequisiteError",
    "ParameterCorruptionError", "SHLighting", "SceneSpecError", "generate_rays", "orbit_camera",
    "render_fused", "render_image", "render_single_layer",
]
