"""Exception types shared across the package.

Each class also carries the CLI exit code it maps to.
"""


class MfbError(Exception):
    exit_code = 1


class DimensionError(MfbError, ValueError):
    exit_code = 2


class ConfigurationError(MfbError, ValueError):
    exit_code = 2


class InputError(MfbError, ValueError):
    exit_code = 2


class ContractError(MfbError, RuntimeError):
    exit_code = 1


class NumericError(MfbError, ArithmeticError):
    exit_code = 3


class TrainingError(NumericError):
    """Raised when the loss stops being finite; carries the iteration."""

    def __init__(self, iteration, message=None):
        self.iteration = iteration
        super().__init__(message or f"loss is not finite at iteration {iteration}")
