"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line can map failure
classes to process status without re-classifying them.
"""


class NNSGError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ValidationError(NNSGError, ValueError):
    """Input failed a shape, range or consistency check."""

    exit_code = 2


class DimensionError(ValidationError):
    """An array has the wrong length or shape."""

    def __init__(self, name, expected, actual):
        self.name = name
        self.expected = expected
        self.actual = actual
        super().__init__(f"{name}: expected dimension {expected}, got {actual}")


class ZeroNormError(ValidationError):
    """Cosine similarity is undefined for a zero vector."""


class ParseError(ValidationError):
    """A text file could not be parsed."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class FileFormatError(ValidationError):
    """A binary file does not follow its declared layout."""


class BadMagicError(FileFormatError):
    pass


class VersionMismatchError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    def __init__(self, expected, actual, what="file"):
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"truncated {what}: expected {expected} bytes, got {actual}"
        )


class EmptyRenderError(NNSGError):
    """The render covers no pixels, so no guidance can be derived."""

    exit_code = 4
