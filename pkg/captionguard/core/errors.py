"""Exception hierarchy; every error carries the exit code the CLI returns for it."""


class CaptionGuardError(Exception):
    """Base error (internal failure unless a subclass says otherwise)"""

    exit_code: int = 4


class InputError(CaptionGuardError, ValueError):
    """Bad input file, schema or configuration"""

    exit_code = 2


class TraceSchemaError(InputError):
    """A trace record is not valid JSON or violates the trace schema"""

    def __init__(self, line_number: int, field: str, message: str):
        self.line_number = line_number
        self.field = field
        super().__init__(f"line {line_number}: field '{field}': {message}")


class TraceInvariantError(InputError):
    """A parsed trace breaks one of the trace invariants"""

    def __init__(self, trace_id: str, field: str, message: str):
        self.trace_id = trace_id
        self.field = field
        super().__init__(f"trace '{trace_id}': field '{field}': {message}")


class SynonymMapError(InputError):
    pass


class ConfigError(InputError):
    pass


class EmptyInputError(InputError):
    pass


class SpanMismatchError(InputError):
    pass


class MissingFeatureError(InputError):
    pass


class DimensionMismatchError(InputError):
    pass


class DegenerateDataError(CaptionGuardError):
    """Data cannot support the requested fit (single class, constant columns)"""

    exit_code = 3


class UndefinedMetricError(DegenerateDataError):
    pass


class InvariantViolation(CaptionGuardError):
    exit_code = 4
