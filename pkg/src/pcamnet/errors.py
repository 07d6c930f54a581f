"""Exception types shared across the package.

Each maps onto one CLI exit code (see ``pcamnet.cli``).
"""


class PCAMError(Exception):
    """Base class for all package errors."""


class DimensionError(PCAMError, ValueError):
    """Shapes or extents are incompatible with an operation."""


class ContractError(PCAMError, ValueError):
    """An input violates an operation precondition."""


class NumericError(PCAMError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


class ConfigError(PCAMError, ValueError):
    """Invalid configuration."""


class DataError(PCAMError, OSError):
    """Unreadable, unwritable or malformed data on disk."""


class DegenerateClassError(PCAMError):
    """A class mask is empty, so its center is undefined.

    ``empty`` lists the offending class indices. Callers are expected to
    recover (PCAM falls back to uneroded masks, then skips).
    """

    def __init__(self, empty):
        self.empty = tuple(empty)
        super().__init__(f"empty class mask(s): {self.empty}")
