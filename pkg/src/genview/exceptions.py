"""Exception hierarchy shared across the package.

Everything raised on purpose derives from :class:`GenViewError`, so callers
(and the CLI) can map domain failures to a single exit path.
"""


class GenViewError(Exception):
    """Base class for all domain errors."""


class DegenerateInputError(GenViewError, ValueError):
    """Input is numerically degenerate (zero norm, zero variance, empty pool)."""


class ShapeMismatchError(GenViewError, ValueError):
    """Array shapes or dimensions do not line up."""


class ScoreParseError(GenViewError, ValueError):
    """A scorer reply could not be parsed. Carries the raw reply."""

    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


class MissingConditioningError(GenViewError, ValueError):
    """A generation mode was requested without the inputs it conditions on."""


class TransportError(GenViewError, RuntimeError):
    """A backend call failed in a way that is safe to retry."""

    retryable = True


class BackendRejectionError(GenViewError, RuntimeError):
    """The backend rejected a request. Terminal; recorded in the manifest."""

    retryable = False


class ManifestCorruptionError(GenViewError, RuntimeError):
    """A manifest file contains an unreadable record. Hard error."""


class TrainingDivergedError(GenViewError, RuntimeError):
    """Training loss went non-finite. Carries the metrics trace so far."""

    def __init__(self, message: str, metrics: list):
        super().__init__(message)
        self.metrics = metrics
