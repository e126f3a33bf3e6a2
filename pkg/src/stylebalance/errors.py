"""Exception hierarchy. Each family maps to a CLI exit code."""


class StyleBalanceError(Exception):
    exit_code = 1


class ValidationError(StyleBalanceError, ValueError):
    exit_code = 2


class IngestionError(ValidationError):
    pass


class DatasetFormatError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class StageDependencyError(StyleBalanceError):
    exit_code = 3


class NumericalAbort(StyleBalanceError, FloatingPointError):
    exit_code = 4
