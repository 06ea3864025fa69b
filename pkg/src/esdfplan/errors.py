"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: domain/config problems -> 2,
numeric failures -> 3, file format problems -> 4.
"""


class DomainError(ValueError):
    """An argument is outside the mathematical domain of an operation."""


class StructureError(ValueError):
    """Shapes or layer wiring are inconsistent."""


class TapeReuseError(RuntimeError):
    """A backward tape was consumed twice."""


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss."""


class FormatError(ValueError):
    """A binary artifact does not match its declared layout."""
