"""Exception hierarchy shared by all nfreg modules."""


class NFRError(Exception):
    """Base class for every error raised by nfreg."""


class ParseError(NFRError, ValueError):
    pass


class DegenerateGeometry(NFRError, ValueError):
    pass


class EmptyMesh(NFRError, ValueError):
    pass


class NotARotation(NFRError, ValueError):
    pass


class NoVisibleSurface(NFRError, RuntimeError):
    pass


class ConvergenceFailure(NFRError, RuntimeError):
    pass


class KTooLarge(NFRError, ValueError):
    pass


class MissingProvenance(NFRError, ValueError):
    pass


class DimensionMismatch(NFRError, ValueError):
    pass


class SizeMismatch(DimensionMismatch):
    pass


class CountMismatch(DimensionMismatch):
    pass


class RankDeficient(NFRError, ArithmeticError):
    pass


class SingularSystem(NFRError, ArithmeticError):
    pass


class NonFiniteEntry(NFRError, ValueError):
    pass


class NoCorrespondences(NFRError, RuntimeError):
    pass


class NonFiniteEnergy(NFRError, FloatingPointError):
    pass
