"""Exception hierarchy shared by every module and mapped to CLI exit codes."""


class PhysioError(Exception):
    category = "error"
    exit_code = 1


class ConfigError(PhysioError):
    category = "config"
    exit_code = 2


class DimensionError(PhysioError):
    category = "shape"
    exit_code = 3


ShapeError = DimensionError


class DataError(PhysioError):
    category = "data"
    exit_code = 4


class FormatError(PhysioError):
    category = "format"
    exit_code = 5


class TrainingDivergedError(PhysioError):
    category = "diverged"
    exit_code = 6


class InternalError(PhysioError):
    category = "internal"
    exit_code = 7
