"""Exception hierarchy. CLI exit codes are keyed off these classes."""


class EmtalError(Exception):
    exit_code = 1


class ConfigError(EmtalError, ValueError):
    exit_code = 2


class DimensionError(EmtalError, ValueError):
    exit_code = 2


class DataError(EmtalError, ValueError):
    exit_code = 2


class NumericError(EmtalError, ArithmeticError):
    exit_code = 3


class ArchiveFormatError(EmtalError):
    exit_code = 1


class ArchiveCorruptionError(ArchiveFormatError):
    pass


class UsageError(EmtalError, RuntimeError):
    exit_code = 2
