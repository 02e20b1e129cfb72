"""Exception taxonomy shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 2, DataError -> 3,
TrainingDiverged / SamplingFailure -> 4.
"""


class DiffcorrError(Exception):
    """Base class for all package errors."""


class InvalidArgument(DiffcorrError, ValueError):
    """Caller violated a documented precondition."""


class ShapeMismatch(InvalidArgument):
    """Operands have incompatible shapes or resolution tags."""


class TrainingDiverged(DiffcorrError, RuntimeError):
    """Non-finite loss or gradient encountered during optimization."""


class SamplingFailure(DiffcorrError, RuntimeError):
    """Denoiser produced non-finite values during reverse diffusion."""


class FormatError(DiffcorrError, ValueError):
    """Malformed on-disk artifact (flow file, checkpoint, image)."""


class ConfigError(DiffcorrError, ValueError):
    """Bad run configuration (unknown keys, invalid values)."""


class DataError(DiffcorrError, RuntimeError):
    """Dataset missing, unreadable, or failing integrity checks."""


class MetricError(DiffcorrError, ValueError):
    """Metric undefined for the given inputs (e.g. empty valid mask)."""
