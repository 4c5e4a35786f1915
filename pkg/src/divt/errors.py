"""Exception types shared across the package.

The file loaders raise a distinct subclass of ``FormatError`` per failure
mode so callers (and the CLI exit-code mapping) can tell a corrupted
header apart from a bad payload without parsing messages.
"""


class DivtError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(DivtError):
    """A file does not conform to one of the DIVT binary formats."""


class BadMagicError(FormatError):
    """File does not start with the expected 4-byte magic."""


class BadVersionError(FormatError):
    """Unsupported format version."""


class BadDtypeError(FormatError):
    """Unknown dtype code in the header."""


class HeaderError(FormatError):
    """Header fields are inconsistent (zero dims, grid mismatch, ...)."""


class TruncatedPayloadError(FormatError):
    """File ends before the header-declared payload is complete."""


class TrailingDataError(FormatError):
    """File contains bytes beyond the header-declared payload."""


class NonFiniteValueError(FormatError):
    """Payload contains a NaN or Inf value."""


class ParameterError(DivtError, ValueError):
    """An argument is outside its documented range."""


class ShapeError(DivtError, ValueError):
    """Array shapes or structures are mutually inconsistent."""


class DivergenceError(DivtError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")
