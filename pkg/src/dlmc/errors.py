"""Exception types shared across the package."""


class DlmcError(Exception):
    """Base class for all library errors."""


class ConfigurationError(DlmcError):
    """Invalid target, sampler, or experiment configuration."""


class DataError(DlmcError):
    """Malformed input data (dataset files, label values, shapes)."""


class DomainError(DlmcError):
    """Input outside the mathematical domain of an operation."""


class FitError(DlmcError):
    """Density-estimator fitting failed (e.g. too few samples)."""
