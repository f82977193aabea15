"""Exception types shared across the package.

The CLI maps these onto exit codes: usage/config problems exit 2, data
problems exit 3, numeric problems exit 4.
"""


class ShapeError(ValueError):
    """A matrix or tensor has the wrong shape for the requested operation."""


class RankError(ValueError):
    """A requested rank is outside the valid range for the operand."""


class NumericError(ArithmeticError):
    """Non-finite values or a numerically impossible result (e.g. a
    covariance with a clearly negative eigenvalue)."""


class DataError(ValueError):
    """Malformed input data: bad rows, out-of-vocabulary indices,
    degenerate label sets."""


class EmptyAccumulatorError(DataError):
    """Statistics were requested from an accumulator that saw no samples."""


class ConfigError(ValueError):
    """A run configuration is malformed (unknown keys, bad stage order)."""
