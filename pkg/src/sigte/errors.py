"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericError and verification failures -> 3.
"""


class ConfigError(ValueError):
    """Invalid configuration: bad hyperparameter, malformed config file, unknown key."""


class DataError(ValueError):
    """Invalid data: malformed record, label out of range, empty evaluation set."""


class NumericError(ArithmeticError):
    """Numeric contract violation: NaN input, integer overflow of a dimension."""


class ShapeError(ValueError):
    """Tensor shape contract violation; the message names the offending shapes."""


class TrainingDivergedError(RuntimeError):
    """Loss became NaN during optimization; the message reports the step."""
