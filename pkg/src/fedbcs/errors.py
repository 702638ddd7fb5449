"""Exception types shared across the package."""


class FedbcsError(Exception):
    """Base class for all package errors."""


class DimensionError(FedbcsError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(FedbcsError):
    """A documented precondition was violated."""


class NumericsError(FedbcsError):
    """NaN/Inf detected at an operation boundary in checked mode."""


class SpectralConsistencyError(FedbcsError):
    """Spectrum violates the conjugate symmetry a real-valued map requires."""


class AggregationError(FedbcsError):
    """Client parameter sets disagree (missing or extra identifiers)."""


class TrainingError(FedbcsError):
    """Local training produced a non-finite loss."""


class EstimationError(FedbcsError):
    """Recorded trace is too short to estimate the requested quantity."""


class TheoryRegimeError(FedbcsError):
    """Inputs violate a validity condition of a convergence bound."""


class ConfigError(FedbcsError):
    """Run configuration could not be parsed or failed validation."""


class CheckpointError(FedbcsError):
    """Checkpoint data is malformed or truncated."""
