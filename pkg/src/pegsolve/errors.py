"""Exception hierarchy shared across the package."""


class PegError(Exception):
    """Base class for all package errors."""


class ConfigurationError(PegError, ValueError):
    """Shapes, widths or settings that do not fit together."""


class InputError(PegError, ValueError):
    """An argument violates an operation's precondition."""


class NoPathError(InputError):
    """Destination unreachable from the source."""


class GenerationError(PegError, RuntimeError):
    """Instance or dataset generation could not satisfy its constraints."""


class TrainingError(PegError, RuntimeError):
    """Non-finite loss, gradient or parameter during optimization."""


class RefusalError(PegError, RuntimeError):
    """An exact computation would exceed its state-space budget."""
