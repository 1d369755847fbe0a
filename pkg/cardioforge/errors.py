"""Exception hierarchy shared by every cardioforge module.

Validation-family errors map to CLI exit code 1, runtime-family errors to 2.
"""


class CardioforgeError(Exception):
    """Base class for all cardioforge errors."""

    exit_code = 2

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.context = context


class ValidationError(CardioforgeError):
    exit_code = 1


class ConfigError(ValidationError):
    """Invalid or missing configuration, or a missing upstream artifact."""


class SignalValidationError(ValidationError, ValueError):
    """A signal violates its invariants (non-finite, empty, bad fs)."""


class SignalFormatError(ValidationError):
    """Malformed or truncated audio container."""


class UnsupportedFormatError(ValidationError):
    """Well-formed audio that this toolkit does not handle (e.g. multichannel WAV)."""


class DSPSpecError(ValidationError, ValueError):
    """Filter, mel or segmentation spec invalid for the given sample rate."""


class StratificationError(ValidationError, ValueError):
    """Not enough subjects per class to build the requested partitions."""


class ShapeError(ValidationError, ValueError):
    """Tensor shapes do not match the configured topology."""


class AggregationError(ValidationError, ValueError):
    """Fragment-to-subject aggregation received an empty group."""


class EvaluationError(ValidationError, ValueError):
    """Metrics requested on inputs that cannot support them."""


class ArgumentError(ValidationError, ValueError):
    """An argument is outside its documented domain (step index, rank, rate)."""


class TrainingError(CardioforgeError):
    """Non-finite loss or gradient during optimisation."""


class SamplingError(CardioforgeError):
    """Ancestral sampling diverged."""


class SVMFitError(CardioforgeError, ValueError):
    """SVM head could not be fitted."""


class ArtifactIOError(CardioforgeError, OSError):
    """A file could not be read or written."""
