"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument broke a documented precondition (shape, range, type)."""


class DomainError(ValueError):
    """A special function was evaluated outside its domain."""


class DegenerateOpinionError(ValueError):
    """An opinion with zero uncertainty mass cannot be mapped back to evidence."""


class TotalConflictError(ArithmeticError):
    """Two opinions conflict so completely that the combination is undefined."""

    def __init__(self, message, normalizer=None, step=None):
        super().__init__(message)
        self.normalizer = normalizer
        self.step = step


class TrainingDiverged(RuntimeError):
    """Raised when a training loss stops being finite."""
