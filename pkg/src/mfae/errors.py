"""Exception types shared across the package."""


class MfaeError(Exception):
    """Base class for all package errors."""


class ConfigError(MfaeError, ValueError):
    """Invalid architecture, training or run configuration."""


class FormatError(MfaeError):
    """A file on disk does not follow the expected layout."""


class BadMagicError(FormatError):
    """The file header magic does not match."""


class TruncatedError(FormatError):
    """The file ended before the declared payload was read."""


class NonFiniteError(MfaeError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


class DivergenceError(NonFiniteError):
    """Training produced a non-finite loss."""
