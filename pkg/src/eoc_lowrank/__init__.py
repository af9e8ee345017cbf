"""Mean-field initialisation theory of wide low-rank feedforward networks.

Analytic side: length/correlation maps, fixed points, edge-of-chaos curves,
depth scales and Jacobian spectrum moments. Empirical side: a finite-width
Monte-Carlo simulator of low-rank networks used to validate the analytics.
"""

from eoc_lowrank.activations import ActivationFamily, get_activation
from eoc_lowrank.config import NetworkConfig
from eoc_lowrank.errors import (
    DegenerateSpectrum,
    DomainError,
    EocError,
    NoConvergence,
    NonFiniteIntegrand,
    NonPositiveLogArgument,
    NumericalOverflow,
    ReversionFailure,
    UnsupportedDerivative,
)
from eoc_lowrank.quadrature import GaussQuadRule

__version__ = "0.1.0"

__all__ = [
    "ActivationFamily",
    "DegenerateSpectrum",
    "DomainError",
    "EocError",
    "GaussQuadRule",
    "NetworkConfig",
    "NoConvergence",
    "NonFiniteIntegrand",
    "NonPositiveLogArgument",
    "NumericalOverflow",
    "ReversionFailure",
    "UnsupportedDerivative",
    "get_activation",
    "__version__",
]
