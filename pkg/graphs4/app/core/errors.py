"""Exception hierarchy shared by the library and the command line.

Every error carries the process exit code the CLI reports for it:
1 for validation problems, 2 for runtime failures.
"""
from typing import Optional

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class GraphS4Error(Exception):
    exit_code: int = EXIT_RUNTIME

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class InvalidArgumentError(GraphS4Error, ValueError):
    exit_code = EXIT_VALIDATION


class ConfigError(InvalidArgumentError):
    def __init__(self, detail: str, field_path: Optional[str] = None):
        if field_path:
            detail = f"{field_path}: {detail}"
        super().__init__(detail)
        self.field_path = field_path


class MissingArtifactError(InvalidArgumentError):
    def __init__(self, path, what: str = "artifact"):
        super().__init__(f"missing {what}: {path}")
        self.path = str(path)


class ParseError(InvalidArgumentError):
    """Malformed file content, located by line/column or byte offset."""

    def __init__(
        self,
        detail: str,
        line: Optional[int] = None,
        column: Optional[int] = None,
        offset: Optional[int] = None,
    ):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column}")
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            detail = f"{detail} ({', '.join(where)})"
        super().__init__(detail)
        self.line = line
        self.column = column
        self.offset = offset


class LockError(GraphS4Error):
    exit_code = EXIT_VALIDATION


class NumericSingularityError(GraphS4Error, ArithmeticError):
    exit_code = EXIT_RUNTIME


class StateError(GraphS4Error, RuntimeError):
    exit_code = EXIT_RUNTIME
