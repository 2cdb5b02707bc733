"""Exception hierarchy; each class carries the CLI exit code it maps to."""


class LexbridgeError(Exception):
    exit_code = 1


class ConfigError(LexbridgeError, ValueError):
    exit_code = 2


class DataError(LexbridgeError, ValueError):
    exit_code = 3


class ShapeError(DataError):
    pass


class NumericalError(LexbridgeError, ArithmeticError):
    exit_code = 4
