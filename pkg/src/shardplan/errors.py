"""Exception hierarchy. Each class maps to a distinct CLI exit status."""


class PlannerError(Exception):
    exit_code = 1


class SpecParseError(PlannerError):
    """Input text is not well-formed (bad JSON, wrong top-level shape)."""

    exit_code = 3

    def __init__(self, message, line=None, column=None):
        if line is not None:
            message = f"line {line}, column {column}: {message}"
        super().__init__(message)
        self.line = line
        self.column = column


class SpecValidationError(PlannerError):
    """Input parsed but violates a field invariant. ``field`` names the offender."""

    exit_code = 4

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class ModelDoesNotFit(PlannerError):
    exit_code = 5

    def __init__(self, message, gap_bytes=None):
        super().__init__(message)
        self.gap_bytes = gap_bytes


class UnderdeterminedFit(PlannerError):
    exit_code = 6

    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("cannot identify coefficients: " + "; ".join(self.missing))


class CalibrationMissing(PlannerError):
    exit_code = 4

    def __init__(self, operator_id):
        super().__init__(f"no gamma coefficient for operator {operator_id!r}")
        self.operator_id = operator_id


class SearchTooLarge(PlannerError):
    exit_code = 1


class DimensionError(PlannerError, ValueError):
    exit_code = 4
