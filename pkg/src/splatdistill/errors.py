"""Exception hierarchy. ``exit_code`` is what the command line returns."""


class SplatDistillError(Exception):
    exit_code = 1


class UsageError(SplatDistillError):
    exit_code = 1


class ConfigError(SplatDistillError):
    exit_code = 2


class SpecError(ConfigError):
    pass


class PreconditionError(ConfigError):
    pass


class FormatError(SplatDistillError):
    exit_code = 3


class DataError(SplatDistillError):
    exit_code = 3


class ShapeError(DataError, ValueError):
    pass


class NumericalError(SplatDistillError):
    exit_code = 4


class PlanningError(NumericalError):
    pass


class AcceptanceFailure(SplatDistillError):
    exit_code = 5
