"""Exception hierarchy shared by every module."""


class ViscosError(Exception):
    """Base class for all library errors."""


class DimensionMismatch(ViscosError, ValueError):
    pass


class NoConvergence(ViscosError):
    """An iterative method stopped before reaching its tolerance."""

    def __init__(self, message, final_residual=float("nan"), iterations=0):
        super().__init__(f"{message} (residual={final_residual:.3e}, iterations={iterations})")
        self.final_residual = final_residual
        self.iterations = iterations


class SingularMatrix(ViscosError, ArithmeticError):
    pass


class SingularSubJacobian(SingularMatrix):
    pass


class ZeroReflector(ViscosError, ValueError):
    pass


class NonFinite(ViscosError, FloatingPointError):
    pass


class SeriesDiverging(ViscosError):
    pass


class InvalidIndices(ViscosError, ValueError):
    pass


class InvalidParams(ViscosError, ValueError):
    pass


class GridTooCoarse(ViscosError):
    pass


class AcceptanceTooLow(ViscosError):
    pass


class DegenerateWeights(ViscosError):
    pass


class SolverFailureRate(ViscosError):
    """Too many constraint solves failed inside an optimisation loop."""
