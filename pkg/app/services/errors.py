"""Exception hierarchy shared by the solver services.

Module-specific errors subclass these and live next to the code that raises
them; the CLI maps the two branches to exit codes.
"""


class DickeError(Exception):
    """Base class for every failure raised by the simulation services."""


class ModelDomainError(DickeError, ValueError):
    """Raised for parameters or quantum numbers outside their domain."""


class NumericalError(DickeError):
    """Raised when a numerical procedure cannot deliver a trustworthy result."""
