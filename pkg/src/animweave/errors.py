"""Exception types raised across the pipeline."""


class ConfigurationError(ValueError):
    """Inconsistent or incomplete configuration (schedules, sites, traces, windows)."""


class InjectionShapeError(ValueError):
    """A site transform returned a value whose shape differs from its input."""


class NumericError(ValueError):
    """Non-finite values reached an operation that requires finite input."""


class PlanningError(RuntimeError):
    """An LLM agent failed to produce a valid answer within its retry budget."""

    def __init__(self, message: str, raw_output: str = ""):
        super().__init__(message)
        self.raw_output = raw_output


class ParseError(ValueError):
    """An agent response did not contain exactly one valid fenced JSON block."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class BenchmarkLoadError(ValueError):
    def __init__(self, message: str, line: int = 0):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line
