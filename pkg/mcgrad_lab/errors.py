"""Exception and warning types raised across the toolkit."""
from __future__ import annotations

from typing import Optional


class McGradLabError(Exception):
    """Root of every error raised by the package."""


class DataError(McGradLabError, ValueError):
    """Input data violates a shape or content contract."""


class ConfigError(McGradLabError, ValueError):
    """Configuration is malformed or out of range."""


class TrainingError(McGradLabError, RuntimeError):
    """Fitting failed after inputs were accepted."""


class MissingLabelColumn(DataError):
    def __init__(self, column: str):
        super().__init__(f"Label column {column!r} not found in file")
        self.column = column


class UnparseableLabel(DataError):
    def __init__(self, row: int, value: object):
        super().__init__(f"Label {value!r} on data row {row} is not one of 0/1/true/false")
        self.row = row
        self.value = value


class EmptyFile(DataError):
    pass


class SchemaMismatch(DataError):
    pass


class DegenerateSplit(DataError):
    pass


class LengthMismatch(DataError):
    pass


class ScoreLengthMismatch(LengthMismatch):
    pass


class ScoreOutOfRange(DataError):
    pass


class EmptyData(DataError):
    pass


class EmptyInput(DataError):
    pass


class DimensionMismatch(DataError):
    def __init__(self, expected: int, got: int, what: str = "feature columns"):
        super().__init__(f"Expected {expected} {what}, got {got}")
        self.expected = expected
        self.got = got


class ShapeMismatch(DimensionMismatch):
    pass


class InvalidInterval(DataError):
    pass


class NoValidGroups(DataError):
    def __init__(self, skipped: Optional[list] = None):
        super().__init__("No group has members with non-degenerate scores")
        self.skipped = list(skipped or [])


class AllSameLabelWarning(UserWarning):
    pass


class NonConvergenceWarning(UserWarning):
    pass


class DegenerateLabelsWarning(UserWarning):
    pass


class SingleClassMetricUndefined(UserWarning):
    pass


__all__ = [
    "McGradLabError",
    "DataError",
    "ConfigError",
    "TrainingError",
    "MissingLabelColumn",
    "UnparseableLabel",
    "EmptyFile",
    "SchemaMismatch",
    "DegenerateSplit",
    "LengthMismatch",
    "ScoreLengthMismatch",
    "ScoreOutOfRange",
    "EmptyData",
    "EmptyInput",
    "DimensionMismatch",
    "ShapeMismatch",
    "InvalidInterval",
    "NoValidGroups",
    "AllSameLabelWarning",
    "NonConvergenceWarning",
    "DegenerateLabelsWarning",
    "SingleClassMetricUndefined",
]
