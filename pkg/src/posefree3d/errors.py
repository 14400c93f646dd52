"""Shared exception types."""


class ConfigurationError(ValueError):
    """Bad user-supplied configuration (invalid law parameters, shape mismatches, ...)."""


class ContractViolation(ValueError):
    """A caller broke an API precondition (e.g. condition pose supplied to the wrong variant)."""


class TrainingDiverged(RuntimeError):
    """Raised when a training step produced a non-finite loss.

    Carries a diagnostics dict (offending batch tensors and metrics) so the
    CLI can dump it to disk before exiting.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
