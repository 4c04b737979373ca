"""Exception types shared across the package.

The CLI maps these to exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4. Everything else is a programming error.
"""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A run/method configuration is invalid."""


class DataError(ValueError):
    """A dataset record or token id is invalid."""


class NumericalError(ArithmeticError):
    """An iteration failed to converge or a value went non-finite."""


class GraphError(RuntimeError):
    """A backward pass was requested on a malformed or detached graph."""
