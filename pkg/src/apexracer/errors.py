"""Exception hierarchy shared across the toolkit."""


class ApexError(Exception):
    """Base class for all toolkit errors."""


class ParseError(ApexError):
    """Malformed input file (CSV row, config line, ...)."""


class GeometryError(ApexError):
    """Track geometry violates an invariant (open loop, non-positive width)."""


class OutOfDomainError(ApexError):
    """Query point too far from the track for an unambiguous projection."""


class DegenerateOffsetError(ApexError):
    """Lateral offset at or beyond the local radius of curvature."""


class NumericalBlowupError(ApexError):
    """Integration produced a non-finite state."""

    def __init__(self, message, env_index=None, substep=None):
        super().__init__(message)
        self.env_index = env_index
        self.substep = substep


class LogGapError(ApexError):
    """Drive log has a timestamp gap beyond the tolerated maximum."""


class DivergenceError(ApexError):
    """Optimization diverged."""


class CheckpointError(ApexError):
    """Checkpoint file corrupt or incompatible."""


class ConfigError(ApexError):
    """Invalid configuration value or file."""


class EnvUsageError(ApexError):
    """Environment API misuse (e.g. step after termination without reset)."""
