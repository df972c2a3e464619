"""
Exception hierarchy for the blind deconvolution engine.

Every error carries the process exit status the command-line tool reports
when it escapes a command: 2 for usage/input problems, 3 for numerical
divergence.
"""

from typing import Any, Optional


class DeblurError(Exception):
    """Base class for all engine errors."""

    exit_status = 2


class DimensionError(DeblurError):
    """Tensor or image shapes do not conform."""


class ConfigurationError(DeblurError):
    """A configuration value is out of range or inconsistent."""


class ContractViolation(DeblurError):
    """A documented precondition of an operation was breached."""


class FormatError(DeblurError):
    """A data file could not be parsed."""

    def __init__(self, path: Any, message: str, line: Optional[int] = None, field: Optional[str] = None):
        self.path = str(path)
        self.line = line
        self.field = field
        location = self.path
        if line is not None:
            location += f":{line}"
        if field:
            location += f" [{field}]"
        super().__init__(f"{location}: {message}")


class DivergenceError(DeblurError):
    """The loss or a gradient became NaN/Inf during optimization."""

    exit_status = 3

    def __init__(self, message: str, iteration: int = 0, partial_report: Any = None):
        super().__init__(message)
        self.iteration = iteration
        self.partial_report = partial_report
