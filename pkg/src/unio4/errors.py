"""Exception hierarchy. The CLI maps each class onto a process exit code."""


class UniO4Error(Exception):
    exit_code = 1


class ConfigError(UniO4Error, ValueError):
    exit_code = 2


class DataError(UniO4Error, ValueError):
    exit_code = 3


class FormatError(DataError):
    pass


class ShapeError(UniO4Error, ValueError):
    exit_code = 3


class NumericError(UniO4Error, FloatingPointError):
    exit_code = 4
