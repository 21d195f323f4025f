"""Exception hierarchy shared across the package."""


class DemsrError(Exception):
    """Base class for all package errors."""


class DimensionError(DemsrError, ValueError):
    """Array or tensor shapes do not satisfy an operation's contract."""


class ContractError(DemsrError):
    """A precondition other than shape was violated."""


class ConfigError(DemsrError, ValueError):
    """Invalid model, training or run configuration."""


class ParseError(DemsrError):
    """Malformed text input (ASCII grids, manifests, config files)."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(DemsrError):
    """Malformed binary input (rasters, checkpoints)."""


class PairingError(DemsrError):
    """Low- and high-resolution tile sets cannot be matched."""


class DegenerateDataError(DemsrError):
    """Data with zero variance where a scale must be estimated."""


class NonFiniteError(DemsrError, FloatingPointError):
    """NaN or Inf detected where all values must be finite."""
