"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class USMError(Exception):
    exit_code = 2


class ShapeError(USMError, ValueError):
    exit_code = 2


class InvalidDimensionError(ShapeError):
    pass


class DataError(USMError, ValueError):
    exit_code = 2


class FormatError(USMError):
    """Malformed or truncated binary file.

    ``offset`` is the byte position where the problem was detected.
    """

    exit_code = 2

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class EmptyCorpusError(USMError):
    exit_code = 3


class InvalidWeightsError(USMError, ValueError):
    exit_code = 4


class UnknownPresetError(InvalidWeightsError, KeyError):
    exit_code = 4

    def __str__(self):
        return Exception.__str__(self)


class InsufficientDataError(USMError):
    exit_code = 5


class InvalidParameterError(USMError, ValueError):
    exit_code = 5


class InvalidEmbeddingError(InsufficientDataError, ValueError):
    pass


class UndefinedCorrelationError(InsufficientDataError):
    pass
