"""Exception hierarchy shared by the solver modules."""


class RBMongeError(Exception):
    """Base class for all package errors."""


class DegenerateDomain(RBMongeError, ValueError):
    pass


class TooCoarse(RBMongeError, ValueError):
    pass


class IndexOutOfRange(RBMongeError, IndexError):
    pass


class NeedsGhost(RBMongeError):
    """A difference stencil leaves the grid and no ghost values were supplied."""


class MissingPhi(RBMongeError, KeyError):
    pass


class NonpositiveDensity(RBMongeError, ArithmeticError):
    pass


class NonFiniteResidual(RBMongeError, ArithmeticError):
    pass


class NotBoundary(RBMongeError, ValueError):
    pass


class CenterSingularity(RBMongeError, ValueError):
    pass


class UnknownProblem(RBMongeError, KeyError):
    pass


class SingularSystem(RBMongeError, ArithmeticError):
    pass


class NewtonDiverged(RBMongeError):
    """Newton iteration failed; ``history`` holds the residual norms."""

    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = list(history)


class OuterNotConverged(RBMongeError):
    """Boundary iteration hit its cap; ``result`` holds the last iterate."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class OnlineDiverged(RBMongeError):
    pass


class ZeroVector(RBMongeError, ValueError):
    pass


class SingularInterpolation(RBMongeError, ArithmeticError):
    def __init__(self, message, round_number=None):
        super().__init__(message)
        self.round_number = round_number


class TruthSolveFailed(RBMongeError):
    pass


class FormatVersionMismatch(RBMongeError):
    pass


class ChecksumMismatch(RBMongeError):
    pass


class GridMismatch(RBMongeError, ValueError):
    pass


class ModelMismatch(RBMongeError, ValueError):
    """A reduced model is used with a problem or parameter it was not built for."""
