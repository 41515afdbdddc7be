"""Exception hierarchy shared by all modules."""


class FreeConvError(Exception):
    """Base class for every error raised by :mod:`freeconv`."""


class DomainError(FreeConvError, ValueError):
    """A transform was evaluated on (or too close to) the support of its measure."""


class PoleError(FreeConvError, ArithmeticError):
    """The reciprocal Cauchy transform has a pole at the requested point."""


class InversionError(FreeConvError, ArithmeticError):
    """Newton inversion of a Cauchy transform did not converge."""


class ConvergenceError(FreeConvError, ArithmeticError):
    """An iterative solver exhausted its budget."""


class BoundaryError(FreeConvError, ArithmeticError):
    """A boundary value along an epsilon ladder did not settle on the real line."""


class FamilyError(FreeConvError, ValueError):
    """A closed form was requested for a measure that has none."""


class SizeError(FreeConvError, ValueError):
    """Matrix dimension too small for the requested model."""


class ConfigError(FreeConvError, ValueError):
    """Inconsistent run configuration."""


class SingularError(FreeConvError, ArithmeticError):
    """A resolvent was requested at a point of the spectrum."""
