"""Exception hierarchy shared across the package.

The CLI maps each family to an exit code: config errors -> 2, data errors -> 3,
numeric failures -> 4.
"""


class CfStressError(Exception):
    exit_code = 1


class ConfigError(CfStressError, ValueError):
    exit_code = 2


class DataError(CfStressError, ValueError):
    exit_code = 3


class NumericError(CfStressError, ArithmeticError):
    exit_code = 4
