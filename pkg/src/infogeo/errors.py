"""Exception types shared across the package."""


class InfoGeoError(Exception):
    """Base class for contract violations raised by this package."""


class ShapeError(InfoGeoError, ValueError):
    pass


class NumericError(InfoGeoError, ArithmeticError):
    pass


class ConfigError(InfoGeoError, ValueError):
    pass


class InputError(InfoGeoError, ValueError):
    pass


class GraphError(InfoGeoError, RuntimeError):
    """Raised on misuse of the computation graph (e.g. a second backward)."""


class FormatError(InfoGeoError, ValueError):
    """Bad magic number or unsupported version in a binary file."""


class CorruptionError(InfoGeoError, ValueError):
    """Checksum mismatch or truncated binary payload."""
