"""Exception types shared across the package."""


class A2mcError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatchError(A2mcError):
    """Operand shapes do not conform; the message carries both shapes."""


class NumericError(A2mcError):
    """A value left the valid numeric domain (NaN/Inf, log of non-positive, ...)."""


class DegenerateInputError(A2mcError):
    """Input is valid in shape but degenerate in value (e.g. near-zero norm)."""


class ContractError(A2mcError):
    """An API precondition was violated (wrong tape, non-scalar loss, mode mismatch)."""


class ConfigError(A2mcError):
    """A configuration value is out of its documented domain."""


class FormatError(A2mcError):
    """A binary file failed validation; the message names the byte offset."""


class TrainingAborted(A2mcError):
    """Pretraining hit a non-finite loss and stopped at the last good state."""

    def __init__(self, message: str, checkpoint_path=None, diagnostics=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
        self.diagnostics = diagnostics or {}
