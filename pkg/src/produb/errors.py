"""Exception hierarchy shared by all produb modules."""


class ProdubError(Exception):
    """Base class for all produb-specific failures."""


class FormatError(ProdubError):
    """A file does not conform to its declared on-disk format."""


class CheckpointVersionError(FormatError):
    """Checkpoint was written by an incompatible format version."""


class InvalidArgumentError(ProdubError, ValueError):
    """Caller violated an argument contract (shape, range, role)."""


class DegenerateInputError(ProdubError, ValueError):
    """Input is structurally valid but too small/empty to process."""


class InvariantViolationError(ProdubError):
    """A domain-type invariant does not hold (e.g. malformed alignment)."""


class ManifestError(ProdubError):
    """Corpus manifest is missing, malformed, or internally inconsistent."""


class TrainingFailureError(ProdubError):
    """Training diverged. Carries the last finite-loss checkpoint, if any."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class FreezeViolationError(ProdubError):
    """Frozen acoustic parameters changed during prosody adaptation."""
