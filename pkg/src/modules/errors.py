"""
Errors - Typed failures raised across the toolkit
Each error carries the CLI exit code main.py reports for it.
"""


class STTCError(Exception):
    """Base class for every toolkit failure."""

    exit_code = 1


# Exit 2: configuration
class InvalidConfig(STTCError):
    exit_code = 2


class InvalidHorizon(STTCError):
    exit_code = 2


# Exit 3: data
class ParseError(STTCError):
    exit_code = 3

    def __init__(self, message, row=None, column=None):
        if row is not None:
            message = f"{message} (row {row}" + (f", column {column})" if column is not None else ")")
        super().__init__(message)
        self.row = row
        self.column = column


class FormatError(STTCError):
    exit_code = 3


class DegenerateSeries(STTCError):
    exit_code = 3


class SingularSystem(STTCError):
    exit_code = 3


class ShapeMismatch(STTCError):
    exit_code = 3


class EmptyMetric(STTCError):
    """Every entry was masked out; the metric is absent rather than zero."""

    exit_code = 3


# Exit 4: stream assertions
class SequenceError(STTCError):
    exit_code = 4


class LeakageError(SequenceError):
    pass


# Exit 5: property battery
class PropertyViolation(STTCError):
    exit_code = 5

    def __init__(self, prop, message):
        super().__init__(f"{prop}: {message}")
        self.prop = prop
