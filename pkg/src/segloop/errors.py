"""Exception hierarchy shared by every segloop module."""


class SegloopError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(SegloopError):
    """An argument violates a documented precondition."""


class FormatError(SegloopError):
    """Serialized data (labels, RLE, manifests, payloads) is malformed."""


class ParseError(FormatError):
    """A text format failed to parse; carries the offending line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ConfigurationError(SegloopError):
    """A layer/network/pipeline configuration is internally inconsistent."""


class EmptyRegionError(DomainError):
    """An operation needing foreground pixels received an empty mask."""


class AdapterError(SegloopError):
    """A segmenter/detector backend failed; message carries a retry hint."""


class EmptyResultError(AdapterError):
    """The segmenter produced no candidate for the given prompts."""


class UnknownImageError(SegloopError):
    """A lookup referenced an image id that is not registered."""
