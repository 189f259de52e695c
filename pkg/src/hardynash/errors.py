"""Exception hierarchy shared by every solver in the package."""


class HardyNashError(Exception):
    """Base class for all package errors."""


# geometry
class GeometryError(HardyNashError, ValueError):
    pass


class EmptyIntersection(GeometryError):
    pass


class EmptyRegion(GeometryError):
    pass


class SingularOverlap(GeometryError):
    pass


class CaseMismatch(GeometryError):
    pass


class MuOutOfRange(HardyNashError, ValueError):
    pass


# discrete PDE core
class ShapeMismatch(HardyNashError, ValueError):
    pass


class LinearSolveFailure(HardyNashError, RuntimeError):
    pass


# iterative solvers
class ConvergenceError(HardyNashError, RuntimeError):
    """Raised by iterative procedures; carries the trace collected so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class MaxIterations(ConvergenceError):
    pass


class NonConvergence(ConvergenceError):
    pass


class ContractionFailure(ConvergenceError):
    pass


class CouplingDivergence(ConvergenceError):
    pass


class PicardDivergence(ConvergenceError):
    pass


class OuterDivergence(ConvergenceError):
    pass


class ObservabilityTooWeak(ConvergenceError):
    pass


class CoercivityFailure(HardyNashError, RuntimeError):
    def __init__(self, message, delta=None):
        super().__init__(message)
        self.delta = delta


# leader / weights
class ZeroPointNondifferentiable(HardyNashError, ValueError):
    pass


class CriticalPointLeak(HardyNashError, ValueError):
    pass


class LambdaEscalationFailure(HardyNashError, RuntimeError):
    pass


class DegenerateRHS(HardyNashError, ValueError):
    pass


# harness
class ParseError(HardyNashError, ValueError):
    pass


class ValidationError(HardyNashError, ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))
