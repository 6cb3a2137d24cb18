"""Exception types shared across the package.

The CLI maps these onto exit codes: ValidationError -> 2,
DivergenceError -> 3. Everything else is a plain crash.
"""


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class DivergenceError(RuntimeError):
    """Raised when a training loss goes non-finite."""


class IntegrityError(RuntimeError):
    """Raised when stored bytes fail their recorded checksum."""
