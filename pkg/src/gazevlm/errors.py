"""Exception types shared across the package.

Exit-code contract for the CLI: 0 success, 1 validation/parse/config
error, 2 internal error.
"""


class GazeVlmError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(GazeVlmError):
    """A malformed input file. Carries the offending location when known."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc += f"{path}"
        if line is not None:
            loc += f":{line}"
        super().__init__(f"{loc}: {message}" if loc else message)
        self.path = path
        self.line = line


class ValidationError(GazeVlmError):
    """Well-formed input that violates a documented invariant."""


class ConfigError(GazeVlmError):
    """An invalid or inconsistent configuration value."""


class TruncationError(GazeVlmError):
    """A sequence would exceed max_T; truncation is never silent."""
