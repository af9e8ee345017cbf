"""Hyperparameter bundle shared by the analytic and simulation code."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

from eoc_lowrank.activations import ActivationFamily, get_activation
from eoc_lowrank.errors import DomainError

ENSEMBLES = ("lowrank_gaussian", "lowrank_orthogonal")
ENSEMBLE_ALIASES = {
    "gaussian": "lowrank_gaussian",
    "orthogonal": "lowrank_orthogonal",
    "lowrank_gaussian": "lowrank_gaussian",
    "lowrank_orthogonal": "lowrank_orthogonal",
}


def normalise_ensemble(name: str) -> str:
    try:
        return ENSEMBLE_ALIASES[name]
    except KeyError:
        raise DomainError(f"unknown weight ensemble {name!r}; choose from {ENSEMBLES}") from None


def rank_for(gamma: float, width: int) -> int:
    """Rank ``round(gamma * width)`` with halves rounded up."""
    return int(math.floor(gamma * width + 0.5))


@dataclass(frozen=True)
class NetworkConfig:
    """Hyperparameters of a constant-width low-rank network.

    Attributes
    ----------
    gamma : float
        Rank-to-width ratio in (0, 1].
    sigma_alpha2 : float
        Variance scale of the low-rank coefficients (entries have variance
        ``sigma_alpha2 / N_in``).
    sigma_b2 : float
        Bias variance.
    depth, width : int
    activation : ActivationFamily or str
    ensemble : str
        ``lowrank_gaussian`` or ``lowrank_orthogonal`` (short forms accepted).

    The analytic maps only ever see ``weight_var = gamma * sigma_alpha2`` and
    ``bias_var = gamma * sigma_b2``; this is what makes the rescaling
    ``(gamma, sa2, sb2) -> (1, gamma*sa2, gamma*sb2)`` exact to the last bit.
    """

    gamma: float = 1.0
    sigma_alpha2: float = 1.0
    sigma_b2: float = 0.0
    depth: int = 10
    width: int = 1000
    activation: ActivationFamily = field(default="tanh")
    ensemble: str = "lowrank_gaussian"

    def __post_init__(self):
        object.__setattr__(self, "activation", get_activation(self.activation))
        object.__setattr__(self, "ensemble", normalise_ensemble(self.ensemble))
        if not 0.0 < self.gamma <= 1.0:
            raise DomainError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not self.sigma_alpha2 >= 0.0:
            raise DomainError(f"sigma_alpha2 must be >= 0, got {self.sigma_alpha2}")
        if not self.sigma_b2 >= 0.0:
            raise DomainError(f"sigma_b2 must be >= 0, got {self.sigma_b2}")
        if int(self.depth) != self.depth or self.depth < 1:
            raise DomainError(f"depth must be a positive integer, got {self.depth}")
        if int(self.width) != self.width or self.width < 1:
            raise DomainError(f"width must be a positive integer, got {self.width}")
        r = self.rank
        if not 1 <= r <= self.width:
            raise DomainError(f"rank round(gamma*width)={r} outside [1, {self.width}]")

    @property
    def rank(self) -> int:
        return rank_for(self.gamma, self.width)

    @property
    def weight_var(self) -> float:
        """``gamma * sigma_alpha2``, the full-rank-equivalent weight variance."""
        return self.gamma * self.sigma_alpha2

    @property
    def bias_var(self) -> float:
        """``gamma * sigma_b2``, the full-rank-equivalent bias variance."""
        return self.gamma * self.sigma_b2

    def rescaled(self) -> "NetworkConfig":
        """The full-rank (gamma = 1) config with the same analytic behaviour."""
        return replace(self, gamma=1.0, sigma_alpha2=self.weight_var, sigma_b2=self.bias_var)

    def with_(self, **changes) -> "NetworkConfig":
        return replace(self, **changes)

    @classmethod
    def from_effective(cls, gamma: float, weight_var: float, bias_var: float, **kw) -> "NetworkConfig":
        """Build from ``gamma * sigma_alpha2`` and ``gamma * sigma_b2``."""
        return cls(gamma=gamma, sigma_alpha2=weight_var / gamma, sigma_b2=bias_var / gamma, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["activation"] = self.activation.name
        return d
