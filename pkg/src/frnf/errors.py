"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for all engine errors."""


class ConfigError(EngineError):
    """Invalid configuration value or unknown mode/kind."""


class DimensionError(EngineError):
    """Shape or size constraint violated."""


class NumericError(EngineError):
    """Non-finite or out-of-domain numeric value."""


class FormatError(EngineError):
    """Malformed on-disk payload. Carries the byte offset of the defect."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class QueryError(EngineError, LookupError):
    """Lookup of an invalid pixel, cell, or key."""


class InputError(EngineError, ValueError):
    """Caller-supplied value outside the accepted domain."""


class CapacityError(EngineError):
    """A fixed-capacity container is full."""


class StateError(EngineError):
    """Operation not valid in the current state."""


class DecisionError(EngineError):
    """A decision rule had no valid input to decide on."""


class EvaluationError(EngineError):
    """A metric had no data to evaluate."""
