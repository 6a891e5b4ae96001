"""Exception types shared across the package."""


class EcholocateError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(EcholocateError, ValueError):
    """A configuration or manifest value is invalid or inconsistent."""


class UsageError(EcholocateError, RuntimeError):
    """An operation was called in a state where it is not allowed."""


class DomainError(EcholocateError, ValueError):
    """An input lies outside the domain an operation is defined on."""


class DegenerateGeometryError(EcholocateError, ValueError):
    """A microphone coincides with a (mirror) source."""


class InputTooShortError(EcholocateError, ValueError):
    """A waveform is shorter than one analysis window."""


class CapacityError(EcholocateError, ValueError):
    """An episode cannot fit in the replay buffer even when empty."""


class CheckpointError(EcholocateError, IOError):
    """A checkpoint file is malformed or incompatible."""
