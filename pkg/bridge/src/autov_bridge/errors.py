"""Exception types raised by the bridge."""


class BridgeError(Exception):
    """Base class for all bridge failures."""


class BridgeFormatError(BridgeError):
    """A file does not match the expected on-disk layout."""


class PreprocessError(BridgeError):
    """An input image or text could not be converted to model tokens."""


class TruncationError(BridgeError):
    """A token sequence exceeds the model's context window.

    Carries the offending lengths so callers can report them without
    re-tokenizing.
    """

    def __init__(self, message: str, *, sequence_length: int, context_length: int):
        super().__init__(message)
        self.sequence_length = sequence_length
        self.context_length = context_length


class ExportError(BridgeError):
    """An export produced no usable output."""
