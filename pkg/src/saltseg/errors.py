"""Exception hierarchy. Each class maps to a CLI exit code."""


class SaltSegError(Exception):
    exit_code = 1


class DimensionError(SaltSegError, ValueError):
    exit_code = 4


class ConfigurationError(SaltSegError, ValueError):
    exit_code = 2


class DataError(SaltSegError):
    exit_code = 3


class FormatError(DataError, ValueError):
    pass


class NumericError(SaltSegError, FloatingPointError):
    exit_code = 4
