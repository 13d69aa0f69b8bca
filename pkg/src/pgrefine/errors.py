"""Exception types shared across the package."""


class PGRefineError(Exception):
    """Base class for all package errors."""


class DomainError(PGRefineError, ValueError):
    """An argument is outside the domain of the operation."""


class ParseError(PGRefineError, ValueError):
    """A text input file is malformed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(PGRefineError, ValueError):
    """A binary file has the wrong magic bytes or an unknown layout."""


class VersionError(FormatError):
    """A binary file was written by an unsupported format version."""


class TruncatedError(FormatError):
    """A binary file ends before its declared payload."""


class NoSignalError(PGRefineError):
    """No channel taps were found in a sounding segment."""
