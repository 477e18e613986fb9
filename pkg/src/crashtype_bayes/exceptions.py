"""Exception hierarchy shared by every module of the package.

Each error names the module that raised it and the process exit code the CLI
reports for it.
"""

from typing import Iterable, Optional


class CrashModelError(Exception):
    """Base class for all errors raised by crashtype_bayes"""

    module: str = "crashtype_bayes"
    exit_code: int = 1

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def __str__(self) -> str:
        return f"[{self.module}] {self.message}"


class ConfigError(CrashModelError):
    module = "run_config"
    exit_code = 2


class SchemaError(CrashModelError):
    module = "data_model"
    exit_code = 3


class DataParseError(CrashModelError):
    """A cell could not be parsed as the number its field requires"""

    module = "data_model"
    exit_code = 3

    def __init__(self, row: int, column: str, value: str):
        super().__init__(f"row {row}, column '{column}': cannot parse {value!r}")
        self.row = row
        self.column = column


class DataValidationError(CrashModelError):
    """A parsed value lies outside its field's codomain"""

    module = "data_model"
    exit_code = 3

    def __init__(self, message: str, row: Optional[int] = None, field: Optional[str] = None):
        prefix = f"row {row}: " if row is not None else ""
        super().__init__(f"{prefix}{message}")
        self.row = row
        self.field = field


class OrientationError(CrashModelError):
    module = "data_model"
    exit_code = 3

    def __init__(self, intersections: Iterable[str], detail: str = "ambiguous approach labels"):
        self.intersections = sorted(set(intersections))
        super().__init__(f"{detail} at intersection(s): {', '.join(self.intersections)}")


class ExposureError(CrashModelError):
    module = "design"
    exit_code = 3

    def __init__(self, record: str, field: str, value: object):
        super().__init__(
            f"record {record}: exposure operand '{field}' must be positive, got {value}"
        )
        self.record = record
        self.field = field


class SpecError(CrashModelError):
    module = "design"
    exit_code = 2


class EmptyDesignError(CrashModelError):
    module = "design"
    exit_code = 3


class NBDomainError(CrashModelError, ValueError):
    module = "negbin"
    exit_code = 1


class NumericError(CrashModelError):
    module = "model_core"
    exit_code = 1


class DivergenceError(CrashModelError):
    """The linear predictor left the range where exp() is representable"""

    module = "model_core"
    exit_code = 1

    def __init__(self, message: str, state: Optional[dict] = None):
        super().__init__(message)
        self.state = state or {}


class ChainError(CrashModelError):
    module = "sampler"
    exit_code = 1


class DegenerateChainError(CrashModelError):
    module = "diagnostics"
    exit_code = 1


class ReportError(CrashModelError):
    module = "posterior_report"
    exit_code = 1


class UsageError(CrashModelError):
    module = "cli"
    exit_code = 2


class ReportFormatError(ReportError):
    """Unknown report format requested"""

    exit_code = 2
