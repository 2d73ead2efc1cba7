"""Exception types shared across the package."""


class LayervolError(Exception):
    """Base class for all package errors."""


class ConfigError(LayervolError, ValueError):
    """Invalid user configuration or input shapes."""


class ParameterCorruptionError(LayervolError, FloatingPointError):
    """A field's parameter vector contains NaN or inf."""


class CheckpointError(LayervolError, ValueError):
    """A checkpoint file could not be parsed."""


class CheckpointVersionError(CheckpointError):
    pass


class GuidanceError(LayervolError, RuntimeError):
    """A guidance backend failed; the iteration may be retried or skipped."""


class SceneSpecError(ConfigError):
    pass


class MissingPrerequisiteError(ConfigError):
    """A stage was started without the checkpoint of an earlier stage."""

    def __init__(self, stage):
        super().__init__(f"missing prerequisite checkpoint for stage '{stage}'")
        self.stage = stage
