"""Exception types shared across the pipeline."""


class PipelineError(Exception):
    """Base class for failures raised by this package."""


class DegenerateRotationError(PipelineError):
    """Rotation too close to the pi-angle singularity of the log map."""


class OutOfRangeError(PipelineError):
    """Query outside the supported domain (time span, interpolation ratio)."""


class InsufficientGeometryError(PipelineError):
    """Point selection or voxelization produced no usable geometry."""


class InsufficientConstraintsError(PipelineError):
    """Too few surfel or feature matches to attempt an alignment."""


class DegenerateAlignmentError(PipelineError):
    """Normal equations numerically singular; the alignment is unreliable."""


class ConfigError(PipelineError):
    """Invalid experiment or scenario configuration."""
