"""Exceptions shared across the pspo_lab apps."""


class UndefinedRatioError(ValueError):
    """Raised when an importance ratio is requested against a zero behaviour probability."""


class OffPolicyBatchError(ValueError):
    """Raised when single-pass (noclip) training is fed a batch the current policy did not generate."""


class ConfigurationError(ValueError):
    """Raised when a configuration object violates its invariants."""
