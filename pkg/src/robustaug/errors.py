"""Exception types shared across the package."""


class RobustAugError(Exception):
    """Base class for all package errors."""


class DimensionError(RobustAugError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(RobustAugError, ValueError):
    """An input lies outside an operation's mathematical domain."""


class ValidationError(RobustAugError, ValueError):
    """A precondition on arguments or configuration failed."""


class FormatError(RobustAugError, ValueError):
    """A file does not follow its declared binary or text format."""


class NumericalError(RobustAugError, FloatingPointError):
    """A NaN or Inf appeared in a forward or backward pass."""


class ConfigError(ValidationError):
    """A run configuration is malformed; ``path`` names the offending key."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)
