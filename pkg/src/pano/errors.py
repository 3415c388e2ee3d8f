"""Exception hierarchy shared by the pipeline.

Each error class maps to one failure family so the CLI can translate it to an
exit code without string matching.
"""


class PanoError(Exception):
    """Base class for all pipeline errors."""


class DimensionError(PanoError, ValueError):
    """Shapes or extents are incompatible with the requested operation."""


class EmptyTargetError(PanoError, ValueError):
    """A loss was asked to average over zero valid pixels."""


class EvaluationError(PanoError, ArithmeticError):
    """A numeric evaluation produced NaN or Inf."""


class GeometryError(PanoError, ValueError):
    """A projection was requested outside its domain of definition."""


class ConfigError(PanoError, ValueError):
    """A configuration value is missing, malformed or unsupported."""


class DataError(PanoError, ValueError):
    """Input data violates its contract (label ids out of range, bad files)."""


class ResourceError(PanoError, MemoryError):
    """An operation would exceed a configured size cap."""
