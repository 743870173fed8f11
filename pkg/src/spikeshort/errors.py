"""Exception types shared across the package.

The CLI maps these onto exit codes: validation problems exit 1, file
format / I/O problems exit 2, numeric aborts exit 3.
"""


class DimensionError(ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A spec, config file, or topology fails validation."""


class InputError(ValueError):
    """An argument value is outside the operation's domain."""


class FormatError(ValueError):
    """A binary file (IDX, checkpoint) is malformed."""


class ConsistencyError(ValueError):
    """Two file or dataset parts that must agree do not."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values.

    ``iteration`` carries the training iteration at which the abort
    happened, when applicable.
    """

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class StateError(RuntimeError):
    """An operation was called in the wrong lifecycle state."""
