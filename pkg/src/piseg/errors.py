"""Exception types shared across the package."""


class PisegError(Exception):
    """Base class for all package errors."""


class DimensionError(PisegError, ValueError):
    """Tensor shapes do not conform for an operation."""


class ConfigError(PisegError, ValueError):
    """An invalid configuration value or combination."""


class ContractError(PisegError, RuntimeError):
    """A call violated an operation's pre-conditions."""


class NonFiniteError(PisegError, FloatingPointError):
    """An operation produced NaN or Inf."""


class FormatError(PisegError, ValueError):
    """A file does not follow its binary format."""


class CorruptCheckpointError(FormatError):
    """A checkpoint container is malformed or does not match the model."""
