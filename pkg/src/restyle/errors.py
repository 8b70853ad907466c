"""Exception types shared across the package."""


class RestyleError(Exception):
    """Base class for all package errors."""


class ConfigurationError(RestyleError, ValueError):
    """Invalid construction arguments or experiment configuration."""


class ContractError(RestyleError, ValueError):
    """An operation received inputs violating its shape/type contract."""


class TrainingError(RestyleError, RuntimeError):
    """Training or optimization diverged (NaN or exploding loss)."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class IngestionError(RestyleError, RuntimeError):
    """A dataset source could not be read."""
