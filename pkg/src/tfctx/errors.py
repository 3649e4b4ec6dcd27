"""Exception types shared across the package.

The CLI maps these onto exit codes: usage/config problems -> 1,
data problems -> 2, numerical failures -> 3.
"""


class ShapeError(ValueError):
    """Operands have inconsistent or invalid dimensions."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared, or a numerical check failed."""


class DataError(RuntimeError):
    """A file, manifest or trial list is missing or malformed."""


class ConfigError(ValueError):
    """A run-config document is invalid (unknown key, bad value)."""
