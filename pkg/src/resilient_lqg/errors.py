"""Exception types shared across the package."""


class ResilientLqgError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(ResilientLqgError, ValueError):
    pass


class IndexOutOfRange(ResilientLqgError, ValueError):
    pass


class NotPSD(ResilientLqgError, ValueError):
    def __init__(self, which: str, min_eigenvalue: float):
        self.which = which
        self.min_eigenvalue = min_eigenvalue
        super().__init__(f"{which} is not positive semidefinite "
                         f"(min eigenvalue {min_eigenvalue:.3e})")


class NotObservable(ResilientLqgError, ValueError):
    def __init__(self, which):
        self.which = which
        super().__init__(f"(A, C) pair for attack pattern {which} is not observable")


class ReferenceViolatesRegions(ResilientLqgError, ValueError):
    pass


class Divergence(ResilientLqgError, RuntimeError):
    pass


class TimeBeyondHorizon(ResilientLqgError, IndexError):
    pass


class Infeasible(ResilientLqgError, RuntimeError):
    def __init__(self, margin: float):
        self.margin = margin
        super().__init__(f"ball intersection is empty (margin {margin:.3e})")


class MaxIterations(ResilientLqgError, RuntimeError):
    def __init__(self, message, best=None, residuals=None):
        self.best = best
        self.residuals = residuals
        super().__init__(message)


class FactorizationFailure(ResilientLqgError, ValueError):
    pass


class SolverNumericalFailure(ResilientLqgError, RuntimeError):
    pass


class NoCertificateAtZero(ResilientLqgError, RuntimeError):
    pass


class RequiresSinglePattern(ResilientLqgError, ValueError):
    pass


class NonFiniteState(ResilientLqgError, RuntimeError):
    pass


class NonConvergence(ResilientLqgError, RuntimeError):
    pass


class NonFinite(ResilientLqgError, ValueError):
    pass


class VariableMismatch(ResilientLqgError, ValueError):
    pass
