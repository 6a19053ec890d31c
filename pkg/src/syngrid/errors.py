"""Exception types raised across the package."""


class SyngridError(Exception):
    """Base class for all package errors."""


class MalformedCommand(SyngridError, ValueError):
    pass


class NoReferent(SyngridError):
    pass


class AmbiguousReferent(SyngridError):
    pass


class GenerationExhausted(SyngridError, RuntimeError):
    pass


class EmptySplit(SyngridError):
    pass


class ShapeMismatch(SyngridError, ValueError):
    pass


class GraphConsumed(SyngridError, RuntimeError):
    pass


class OutOfVocab(SyngridError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class DivergedLoss(SyngridError, FloatingPointError):
    pass
