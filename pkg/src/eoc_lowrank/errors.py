"""Exception hierarchy shared by the analytic and simulation modules."""


class EocError(Exception):
    """Base class for every error raised by this package."""


class DomainError(EocError, ValueError):
    """An argument lies outside the domain of the operation."""


class UnsupportedDerivative(EocError, ValueError):
    """A derivative order was requested that the activation does not have."""


class NonFiniteIntegrand(EocError, ArithmeticError):
    """The integrand returned inf or nan on a quadrature node or sample."""


class NonPositiveLogArgument(EocError, ArithmeticError):
    """A depth scale needs log(x) but x <= 0."""

    def __init__(self, message, argument=None):
        super().__init__(message)
        self.argument = argument


class NoConvergence(EocError, ArithmeticError):
    """A fixed-point iteration ran out of iterations.

    ``diagnostics`` holds the last iterate, the last step size and the
    iteration count so callers can decide what to do with a partial result.
    """

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class ReversionFailure(EocError, ArithmeticError):
    """A power series has no compositional inverse (zero linear term)."""


class DegenerateSpectrum(EocError, ArithmeticError):
    """The activation-derivative moment mu_1 vanishes."""


class NumericalOverflow(EocError, OverflowError):
    """Propagated values stopped being finite; ``layer`` says where."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer
