"""Exception types shared across the package."""


class MstMixError(Exception):
    """Base class for all package-specific errors."""


class InvalidInputError(MstMixError, ValueError):
    """Non-finite or otherwise unusable numeric input."""


class ShapeError(MstMixError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(MstMixError, ValueError):
    """A hyperparameter or argument is outside its valid range."""


class InsufficientTokensError(MstMixError, ValueError):
    """A modality has fewer tokens than an operation requires."""


class SequenceLengthError(MstMixError, ValueError):
    """A token sequence exceeds its configured maximum length."""


class EmptyEvaluationError(MstMixError, ValueError):
    """A metric was requested over zero effective positions."""


class FormatError(MstMixError, ValueError):
    """A serialized artifact is missing, truncated, or of the wrong version."""


class ConfigError(MstMixError, ValueError):
    """A run configuration failed validation."""


class CheckpointError(MstMixError, ValueError):
    """A checkpoint is incompatible with the requested operation."""


class VerificationError(MstMixError, RuntimeError):
    """A correctness check could not be carried out or did not hold."""


class DivergenceError(MstMixError, RuntimeError):
    """Training produced a non-finite loss."""
