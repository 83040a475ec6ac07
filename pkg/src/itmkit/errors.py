"""Exception hierarchy shared across the toolkit.

Library code raises these types and never exits; the CLI maps them to
process exit codes (see itmkit.cli).
"""


class ItmkitError(Exception):
    """Base class for all toolkit errors."""


class FileFormatError(ItmkitError):
    """A file cannot be decoded: bad magic, truncation, malformed JSON."""


class IntegrityError(ItmkitError):
    """Structurally readable input that violates a data invariant."""


class ValidationError(ItmkitError):
    """Bad argument, configuration value, or precondition."""


class UndefinedCorrelationError(ValidationError):
    """Correlation requested on data with zero variance."""


class ProvenanceError(ItmkitError):
    """A persisted artifact does not match the inputs it claims to come from."""


class DivergenceError(ItmkitError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
