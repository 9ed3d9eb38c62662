"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
NumericalAbort -> 3, DataIntegrityError and OSError -> 4.
"""


class VemkdError(Exception):
    """Base class for all package errors."""


class ConfigError(VemkdError):
    """Invalid or inconsistent configuration, names the offending key."""


class ContractViolation(VemkdError):
    """An operation was called with inputs that break its contract."""


class SamplerDivergence(VemkdError):
    """Langevin sampling produced a non-finite gradient."""

    def __init__(self, message: str, step_index: int = 0):
        super().__init__(message)
        self.step_index = step_index


class SequencingError(VemkdError):
    """Trainer steps were invoked out of order (e.g. stale negative cache)."""


class ModeError(VemkdError):
    """Operation not available in the configured training mode."""


class DataIntegrityError(VemkdError):
    """On-disk dataset does not match its manifest checksums."""


class NumericalAbort(VemkdError):
    """Training aborted after sustained non-finite losses."""
