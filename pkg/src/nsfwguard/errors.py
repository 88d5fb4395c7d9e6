"""Exception hierarchy shared across the package."""


class NsfwGuardError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(NsfwGuardError):
    """A value violates a documented invariant (bad sample, bad config, ...)."""


class ParseError(NsfwGuardError):
    """A serialized artifact (manifest, checkpoint, image file) is malformed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyDatasetError(NsfwGuardError):
    """An operation that needs at least one sample received none."""


class EmptyBatchError(NsfwGuardError):
    """A training/gradient step received an empty batch."""


class EmptySelectionError(NsfwGuardError):
    """A selection mask has no bits set."""


class ShapeError(NsfwGuardError):
    """Array dimensions do not match the operation's contract."""


class RangeError(NsfwGuardError):
    """A scalar argument is outside its allowed range."""


class NumericError(NsfwGuardError):
    """Non-finite values reached a numeric kernel."""


class CompositionError(NsfwGuardError):
    """A source pool cannot satisfy the requested dataset composition."""

    def __init__(self, source: str, message: str = ""):
        self.source = source
        super().__init__(message or f"insufficient samples for source {source}")


class BackendError(NsfwGuardError):
    """A generator backend failed; carries the backend name."""

    def __init__(self, backend: str, message: str = ""):
        self.backend = backend
        super().__init__(message or f"backend {backend} failed")
