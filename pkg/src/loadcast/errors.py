"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: user input problems exit 2, data
problems exit 3, artifact compatibility problems exit 4, anything else 1.
"""


class LoadcastError(Exception):
    """Base class for all package errors."""


class ShapeError(LoadcastError):
    """Operand shapes do not satisfy an operation's contract."""


class ContractError(LoadcastError):
    """A documented precondition was violated by the caller."""


class DomainError(LoadcastError):
    """Mathematical domain violation (e.g. log of a non-positive value)."""


class PoisonedStateError(LoadcastError):
    """A non-finite gradient would corrupt optimizer state."""


class InputError(LoadcastError):
    """User-supplied input or configuration is invalid."""


class RoutingError(InputError):
    """No adapter is registered for the requested group."""


class DataError(LoadcastError):
    """A data file is malformed or internally inconsistent."""


class CorruptionError(DataError):
    """A stored artifact failed its integrity check."""


class CompatibilityError(LoadcastError):
    """Artifacts cannot be combined (e.g. adapter vs. wrong backbone)."""


class VersionError(CompatibilityError):
    """A stored artifact is newer than this implementation understands."""
