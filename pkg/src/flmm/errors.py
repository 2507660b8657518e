"""Exception hierarchy shared across the package."""


class FlmmError(Exception):
    """Base class for all package errors."""


class ShapeError(FlmmError):
    """Dimension mismatch between operands."""


class DegenerateInputError(FlmmError):
    """Input that normalizes to zero or is otherwise unusable."""


class VocabularyError(FlmmError):
    """Token id outside the model vocabulary."""


class BatchError(FlmmError):
    """Batch too small or empty for the requested operation."""


class NumericError(FlmmError):
    """Non-finite values where finite ones are required."""


class EmptyBankError(FlmmError):
    """Retrieval attempted over an empty caption bank."""


class EmptyProbeError(FlmmError):
    """Probe set with no items."""


class CoverageError(FlmmError):
    """A probe item covered by no client."""


class IdentityError(FlmmError):
    """Mismatched identities (probe vs consensus, snapshot vs baseline)."""


class StalenessError(FlmmError):
    """Updates from mixed or out-of-window base versions."""


class FutureVersionError(FlmmError):
    """Update claims a base version newer than the server's."""


class HistoryError(FlmmError):
    """Missing round-log or version-history entry."""


class PlanError(FlmmError):
    """Invalid aggregation plan (unknown block name, empty mask)."""


class FactorizationError(FlmmError):
    """Low-rank refactorization failed to converge."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class SpecError(FlmmError):
    """Invalid corpus or scenario specification."""


class TemplateGapError(FlmmError):
    """Object label with no caption template."""


class StarvationError(FlmmError):
    """A party's kept data shrank below the survival floor."""

    def __init__(self, message: str, party: str):
        super().__init__(message)
        self.party = party


class SizeError(FlmmError):
    """Problem too large for the exact method."""


class SamplingError(FlmmError):
    """Monte Carlo sampling produced no usable samples."""


class MaskingError(FlmmError):
    """Pairwise masking needs at least two clients."""


class AuthError(FlmmError):
    """Bad or missing credential."""


class ConflictError(FlmmError):
    """Re-registration with a different token."""


class DuplicateError(FlmmError):
    """Second submission from one party in one round."""


class ValidationError(FlmmError):
    """Malformed client update (shape or NaN)."""


class RangeError(FlmmError):
    """Parameter outside its valid range."""


class ProtocolError(FlmmError):
    """Malformed wire frame."""


class TransportError(FlmmError):
    """Connection failed after retries."""


class ConfigError(FlmmError):
    """Invalid scenario configuration."""


class CheckpointError(FlmmError):
    """Corrupt or unreadable checkpoint bytes."""
