"""Exception types shared across the package."""


class CoheritError(Exception):
    """Base class for package-specific failures."""


class PedigreeError(CoheritError, ValueError):
    """Malformed family structure (duplicate roles, bad member count, ...)."""


class DomainError(CoheritError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class UnderflowError(CoheritError, ArithmeticError):
    """Conditional moments requested on a region with vanishing probability mass."""


class ConvergenceError(CoheritError, RuntimeError):
    """Iterative procedure exhausted its iteration budget."""

    def __init__(self, message, trace=None, best=None):
        super().__init__(message)
        self.trace = trace
        self.best = best


class RankDeficiencyError(CoheritError, ValueError):
    """Normal equations singular even after regularization."""

    def __init__(self, message, columns=None):
        super().__init__(message)
        self.columns = columns or []


class SeparationError(CoheritError, ValueError):
    """Perfect separation in a binary-response fit."""

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class InferenceUnreliableError(CoheritError, RuntimeError):
    """Too many bootstrap refits failed; carries the partial report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
