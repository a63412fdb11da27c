"""Exception types shared across the package.

Each carries the process exit code the CLI maps it to.
"""


class SidEditError(Exception):
    exit_code = 1


class InputError(SidEditError, ValueError):
    exit_code = 2


class ConfigError(SidEditError, ValueError):
    exit_code = 2


class DataError(SidEditError, ValueError):
    exit_code = 2


class PrerequisiteMissing(SidEditError, FileNotFoundError):
    exit_code = 3


class NumericalError(SidEditError, ArithmeticError):
    exit_code = 4


class ConditioningError(NumericalError):
    def __init__(self, message, min_eigenvalue=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue
