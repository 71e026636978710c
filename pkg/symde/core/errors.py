"""Exception hierarchy shared by every stage.

Each error carries the process exit code the command line reports for it:
2 for configuration problems, 3 for bad input data, 4 for numerical failures.
"""
from typing import Any, Dict, Optional


class SymdeError(Exception):
    exit_code: int = 1


class ConfigError(SymdeError):
    exit_code = 2


class DataError(SymdeError):
    exit_code = 3


class NumericalError(SymdeError):
    exit_code = 4


# expr
class ExpressionSyntaxError(DataError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class ArityError(DataError):
    pass


class UnknownSymbol(DataError):
    pass


class DimensionMismatch(DataError):
    pass


# density
class NonFiniteInput(DataError):
    pass


class NonPositiveBandwidth(ConfigError):
    pass


class EmptyCandidates(ConfigError):
    pass


class TooFewSamples(DataError):
    pass


class GridTooCoarse(ConfigError):
    pass


# decompose
class SingularConditioning(NumericalError):
    pass


class WeightMismatch(DataError):
    pass


class PartitionError(DataError):
    pass


# support
class EmptySupport(NumericalError):
    pass


class DegenerateInput(DataError):
    pass


# validate
class NonPositiveVolume(NumericalError):
    pass


class EmptySampleSet(DataError):
    pass


# datagen
class NonPdCovariance(DataError):
    pass


class PoleHit(NumericalError):
    pass


class EnvelopeTooSmall(NumericalError):
    pass


# files
class CsvFormatError(DataError):
    def __init__(self, path: str, line: int, reason: str):
        super().__init__(f"{path}: line {line}: {reason}")
        self.path = path
        self.line = line


class StageError(SymdeError):
    """A failure inside a named pipeline stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)

    def to_record(self) -> Dict[str, Any]:
        return error_record(self.cause, self.stage)


def error_record(exc: BaseException, stage: Optional[str] = None) -> Dict[str, Any]:
    """Machine-readable description of a failure."""
    return {
        "stage": stage,
        "error": type(exc).__name__,
        "message": str(exc),
        "exit_code": getattr(exc, "exit_code", 1),
    }
