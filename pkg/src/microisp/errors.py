"""Exception types shared across the package."""


class MicroISPError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(MicroISPError, ValueError):
    """An operation was called with arguments that violate its contract
    (shape or channel mismatch, wrong dtype, unknown op id, ...)."""


class ConfigError(MicroISPError, ValueError):
    """Invalid model, schedule, plan or dataset configuration."""


class FormatError(MicroISPError, ValueError):
    """A file could not be parsed. ``field`` names the offending part."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class TrainingError(MicroISPError, RuntimeError):
    """Training aborted, e.g. because the loss became non-finite."""
