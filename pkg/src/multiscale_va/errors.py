"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ValueError):
    """A configuration or hyperparameter value is invalid."""


class ContractError(ValueError):
    """A call violated an operation's precondition."""


class InputError(ValueError):
    """User-supplied data is unusable (empty, too short, malformed)."""


class ParseError(InputError):
    """A data file does not follow the expected schema."""


class RangeError(InputError):
    """A value lies outside its permitted range."""


class TrainingError(RuntimeError):
    """Training diverged (NaN loss or gradient)."""
