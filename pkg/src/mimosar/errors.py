"""Exception types raised across the package.

Each carries the CLI exit code used by :mod:`mimosar.cli`.
"""


class MimosarError(Exception):
    exit_code = 1
    code = "error"


class ConfigError(MimosarError, ValueError):
    """Invalid or incomplete experiment configuration."""

    exit_code = 2
    code = "validation"


class InsufficientGcpError(MimosarError):
    """Too few usable ground control points to solve for the velocity error."""

    exit_code = 3
    code = "insufficient_gcps"


class IllConditionedGeometryError(MimosarError):
    """The GCP geometry leaves some velocity component unobservable."""

    exit_code = 4
    code = "ill_conditioned"

    def __init__(self, message, condition_number=None):
        super().__init__(message)
        self.condition_number = condition_number


class FormatError(MimosarError):
    """A binary or JSON file does not follow its declared layout."""

    exit_code = 5
    code = "io"

    def __init__(self, message, path=None, offset=None):
        where = ""
        if path is not None:
            where += f"{path}: "
        if offset is not None:
            where += f"byte offset {offset}: "
        super().__init__(where + message)
        self.path = path
        self.offset = offset
