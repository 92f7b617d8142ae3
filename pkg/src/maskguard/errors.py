"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A call violated an operation's preconditions."""


class NumericError(ArithmeticError):
    """Non-finite values reached an operation that requires finite input."""


class InputError(ValueError):
    """Invalid user-supplied data (empty datasets, out-of-canvas objects, ...)."""


class RangeError(InputError):
    """An index or timestep lies outside its valid range."""


class ConfigError(ValueError):
    """Malformed or incompatible configuration."""

    def __init__(self, message: str, key: str | None = None) -> None:
        super().__init__(message)
        self.key = key


class MissingCheckpointError(FileNotFoundError):
    """An upstream pipeline stage has not produced its checkpoint yet."""

    def __init__(self, stage: str, path: str) -> None:
        super().__init__(f"missing checkpoint for stage '{stage}': {path}")
        self.stage = stage
        self.path = path
