"""Exception types shared across the pipeline."""


class MapoError(Exception):
    """Base class for all package-specific errors."""


class ContextOverflowError(MapoError):
    """Prompt plus generation budget exceeds the model's context window."""


class EndpointError(MapoError):
    """Remote generation endpoint unreachable, non-200, or malformed reply."""


class EmptyCompletionError(MapoError):
    """A completion was required to be non-empty."""


class DatasetMismatchError(MapoError):
    """Two reports being compared do not describe the same dataset/task."""


class PipelineError(MapoError):
    """Stage ordering, manifest, or artifact-consistency failure."""


class ConfigError(MapoError):
    """Config file failed validation."""
