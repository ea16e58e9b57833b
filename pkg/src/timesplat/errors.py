"""Exception types shared across the package."""


class TimesplatError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(TimesplatError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class NumericalError(TimesplatError, ArithmeticError):
    """A computation produced non-finite or degenerate values."""


class StateError(TimesplatError, RuntimeError):
    """An operation was called without the cached state it requires."""


class ConfigError(TimesplatError, ValueError):
    """Invalid configuration, manifest, or command-line usage."""


class FormatError(TimesplatError, ValueError):
    """A binary or image file does not match its expected format."""


class ParseError(TimesplatError, ValueError):
    """A text file could not be parsed."""


class UnsupportedError(TimesplatError, ValueError):
    """The input uses a feature this implementation does not support."""
