"""Exception types shared across the simulator."""


class FlsimError(Exception):
    """Base class for every error raised by flsim."""


class ConfigurationError(FlsimError, ValueError):
    """A configuration or shape contract was violated."""


class InputError(FlsimError, ValueError):
    """Bad caller-supplied data (sequence too long, empty mask, ...)."""


class FormatError(FlsimError, ValueError):
    """A serialized artifact is corrupt, truncated or malformed."""


class UsageError(FlsimError, RuntimeError):
    """An object was used out of order, e.g. a tape backpropagated twice."""


class ProtocolError(FlsimError, ValueError):
    """A client update does not match the server's adapter layout."""


class TrainingDivergedError(FlsimError, RuntimeError):
    """Local training produced a non-finite loss."""
