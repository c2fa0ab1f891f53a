class LogofuseError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(LogofuseError, ValueError):
    pass


class DegenerateInputError(LogofuseError, ValueError):
    pass


class GraphError(LogofuseError, RuntimeError):
    pass


class NonFiniteError(LogofuseError, FloatingPointError):
    pass


class ValidationError(LogofuseError, ValueError):
    pass


class FormatError(LogofuseError, ValueError):
    """A binary or JSONL file does not match its declared layout."""


class CaptionError(LogofuseError, RuntimeError):
    pass
