"""Exception taxonomy shared across the package.

The CLI maps these onto its exit-code contract: config errors exit 2,
IO errors exit 3, numerical errors exit 4.
"""


class RankAllocError(Exception):
    """Base class for all package errors."""


class ShapeError(RankAllocError, ValueError):
    """Operands have incompatible dimensions."""


class InputError(RankAllocError, ValueError):
    """A value violates an operation's precondition."""


class UsageError(RankAllocError, RuntimeError):
    """An API was called out of protocol (e.g. double backward)."""


class ConfigError(RankAllocError, ValueError):
    """A run configuration is invalid or incomplete."""


class NumericalError(RankAllocError, ArithmeticError):
    """A computation produced non-finite values or failed to converge."""
