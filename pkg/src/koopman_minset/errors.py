"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument broke an operation's precondition (shape, range, ...)."""


class DivergenceError(ArithmeticError):
    """A numerical process produced non-finite values.

    ``where`` is the last valid time (integration) or the epoch index (training).
    """

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class DefectiveSystemError(ValueError):
    """Repeated eigenvalue; the split construction needs a diagonalizable matrix."""


class ConservationDirectionError(ValueError):
    """Zero eigenvalue: the direction is already a conservation law, no time map exists."""


class SingularPointError(ValueError):
    """A chart was evaluated outside its domain guard."""

    def __init__(self, message, coordinates=()):
        super().__init__(message)
        self.coordinates = tuple(coordinates)


class IllegalActionError(ValueError):
    """A combination of time mappings does not keep unit time derivative."""


class DomainError(ValueError):
    """A combination is evaluated where its branch guard fails."""

    def __init__(self, message, points=None):
        super().__init__(message)
        self.points = points


class EmptyReportError(ValueError):
    """Every probe point was skipped; nothing to report."""


class ConfigError(ValueError):
    """Invalid training or run configuration."""
