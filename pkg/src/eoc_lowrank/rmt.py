"""Spectral densities, S-transforms and analytic Jacobian moments.

Convention for the low-rank Gaussian ensemble: ``A`` has shape
``(gamma N) x N`` with entry variance ``sigma_alpha2 / N``. The spectrum of
``A^T A`` is then an atom of mass ``1 - gamma`` at zero plus a
Marchenko-Pastur bulk of mass ``gamma`` on
``sigma_alpha2 * [(1 - sqrt(gamma))^2, (1 + sqrt(gamma))^2]``. With this
convention the numerically integrated moments reproduce the closed-form
S-transform, which is what every downstream number uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from eoc_lowrank.config import NetworkConfig, normalise_ensemble
from eoc_lowrank.errors import DegenerateSpectrum, DomainError, ReversionFailure
from eoc_lowrank.meanfield import dphi_moment
from eoc_lowrank.quadrature import GaussQuadRule
from eoc_lowrank.records import SpectrumMoments
from eoc_lowrank.series import PowerSeries, from_moments

DEFAULT_SERIES_ORDER = 8
LEGENDRE_NODES = 200


def _check_gamma(gamma: float) -> None:
    if not 0.0 < gamma <= 1.0:
        raise DomainError(f"gamma must lie in (0, 1], got {gamma}")


@dataclass(frozen=True)
class MarchenkoPasturBulk:
    """Continuous part ``mass * MP(shape, scale)`` of a spectral density.

    ``shape`` is the aspect ratio ``gamma`` and ``scale`` the entry-variance
    factor ``sigma_alpha2``; the support is
    ``scale * [(1 - sqrt(shape))^2, (1 + sqrt(shape))^2]``.
    """

    scale: float
    shape: float
    mass: float

    def __post_init__(self):
        if not self.scale > 0:
            raise DomainError(f"bulk scale must be positive, got {self.scale}")
        if not 0 < self.shape <= 1:
            raise DomainError(f"bulk shape must lie in (0, 1], got {self.shape}")

    @property
    def lower(self) -> float:
        return self.scale * (1.0 - math.sqrt(self.shape)) ** 2

    @property
    def upper(self) -> float:
        return self.scale * (1.0 + math.sqrt(self.shape)) ** 2

    @property
    def support(self) -> tuple[float, float]:
        return self.lower, self.upper

    def pdf(self, lam):
        """Bulk density; integrates to ``mass`` and vanishes off the support."""
        lam = np.asarray(lam, dtype=float)
        lo, hi = self.support
        inside = (lam > lo) & (lam < hi)
        safe = np.where(inside, lam, 1.0)
        root = np.sqrt(np.clip((hi - safe) * (safe - lo), 0.0, None))
        # normalised MP has 1 / (2 pi scale shape lam); times mass
        val = np.where(inside, self.mass * root / (2.0 * math.pi * self.scale * self.shape * safe), 0.0)
        return float(val) if val.ndim == 0 else val

    def moments(self, kmax: int, nodes: int = LEGENDRE_NODES) -> np.ndarray:
        """``int lam^k pdf(lam) dlam`` for ``k = 0..kmax``.

        Uses ``lam = c + h cos(theta)``, which turns the square-root edges
        into a smooth integrand that Gauss-Legendre handles spectrally.
        """
        x, w = _legendre(nodes)
        theta = 0.5 * math.pi * (x + 1.0)
        w = 0.5 * math.pi * w
        lo, hi = self.support
        c, h = 0.5 * (lo + hi), 0.5 * (hi - lo)
        lam = c + h * np.cos(theta)
        base = w * (h * np.sin(theta)) ** 2 * self.mass / (2.0 * math.pi * self.scale * self.shape * lam)
        powers = lam[None, :] ** np.arange(kmax + 1)[:, None]
        return powers @ base


@lru_cache(maxsize=8)
def _legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.polynomial.legendre.leggauss(n)


@dataclass(frozen=True)
class AtomicPlusBulkDensity:
    """Point masses plus an optional Marchenko-Pastur bulk.

    Attributes
    ----------
    atoms : tuple of (location, mass)
    bulk : MarchenkoPasturBulk or None
    """

    atoms: tuple = ()
    bulk: Optional[MarchenkoPasturBulk] = None
    label: str = field(default="", compare=False)

    def __post_init__(self):
        atoms = tuple((float(x), float(m)) for x, m in self.atoms)
        if any(not 0.0 <= m <= 1.0 for _, m in atoms):
            raise DomainError("atom masses must lie in [0, 1]")
        object.__setattr__(self, "atoms", atoms)

    @property
    def total_mass(self) -> float:
        bulk = self.bulk.mass if self.bulk is not None else 0.0
        return sum(m for _, m in self.atoms) + bulk

    def moments(self, kmax: int) -> np.ndarray:
        """Moments ``m_0..m_kmax``: exact atoms plus quadrature over the bulk."""
        out = np.zeros(kmax + 1)
        ks = np.arange(kmax + 1)
        for x, m in self.atoms:
            out += m * np.where(ks == 0, 1.0, x ** ks)
        if self.bulk is not None:
            out += self.bulk.moments(kmax)
        return out


def density_for_ensemble(ensemble: str, gamma: float, sigma_alpha2: float) -> AtomicPlusBulkDensity:
    """Limiting spectral density of ``W^T W`` for one layer."""
    ensemble = normalise_ensemble(ensemble)
    _check_gamma(gamma)
    if not sigma_alpha2 > 0:
        raise DomainError(f"sigma_alpha2 must be positive, got {sigma_alpha2}")
    zero_mass = max(0.0, 1.0 - gamma)
    atoms = [(0.0, zero_mass)] if zero_mass > 0 else []
    if ensemble == "lowrank_orthogonal":
        atoms.append((sigma_alpha2, gamma))
        return AtomicPlusBulkDensity(tuple(atoms), None, ensemble)
    return AtomicPlusBulkDensity(tuple(atoms), MarchenkoPasturBulk(sigma_alpha2, gamma, gamma), ensemble)


def density_moments(density: AtomicPlusBulkDensity, kmax: int) -> np.ndarray:
    return density.moments(kmax)


def mp_density_eval(gamma: float, sigma_alpha2: float, lam: float):
    """Bulk density of the low-rank Gaussian ``W^T W`` at ``lam`` (atoms excluded)."""
    _check_gamma(gamma)
    return MarchenkoPasturBulk(sigma_alpha2, gamma, gamma).pdf(lam)


def s_transform(ensemble: str, gamma: float, sigma_alpha2: float, order: int = DEFAULT_SERIES_ORDER) -> PowerSeries:
    """Series of ``S_{W^T W}(z)`` around zero from its closed form.

    Orthogonal: ``(1 + z) / (1 + z / gamma)``; Gaussian:
    ``(1 + z) / (1 + z (1 + 1/gamma) + z^2 / gamma)``, both times
    ``1 / (gamma sigma_alpha2)``.
    """
    ensemble = normalise_ensemble(ensemble)
    _check_gamma(gamma)
    if not sigma_alpha2 > 0:
        raise DomainError(f"sigma_alpha2 must be positive, got {sigma_alpha2}")
    if order < 1:
        raise DomainError(f"order must be >= 1, got {order}")
    g = 1.0 / gamma
    numer = PowerSeries([1.0, 1.0], order)
    if ensemble == "lowrank_orthogonal":
        denom = PowerSeries([1.0, g], order)
    else:
        denom = PowerSeries([1.0, 1.0 + g, g], order)
    return numer * denom.reciprocal() * (g / sigma_alpha2)


def normalised(series: PowerSeries) -> PowerSeries:
    """``S / S(0)``: the ``1 + s1 z + s2 z^2 + ...`` form."""
    return series / series[0]


def s1_coefficient(ensemble: str, gamma: float) -> float:
    """First normalised coefficient ``s1``; independent of ``sigma_alpha2``."""
    return normalised(s_transform(ensemble, gamma, 1.0, 1))[1]


def s_transform_from_moments(moments, order: int = DEFAULT_SERIES_ORDER) -> PowerSeries:
    """``S(z) = (1 + z) / z * psi^{-1}(z)`` with ``psi(z) = sum m_k z^k``.

    ``moments`` must hold ``m_0..m_{order+1}``.
    """
    moments = list(moments)
    if len(moments) < order + 2:
        raise DomainError(f"need moments up to m_{order + 1}")
    if moments[1] == 0:
        raise ReversionFailure("first moment is zero; the moment series is not invertible")
    psi = from_moments(moments[: order + 2])
    inv = psi.reversion().shift_down()
    one = moments[1] ** 0
    return inv * PowerSeries([one, one], order)


def s_transform_from_density(density: AtomicPlusBulkDensity, order: int = DEFAULT_SERIES_ORDER) -> PowerSeries:
    """S-transform series from numerically integrated density moments."""
    if abs(density.total_mass - 1.0) > 1e-10:
        raise DomainError(f"density mass {density.total_mass} differs from 1")
    return s_transform_from_moments(density.moments(order + 1), order)


def jacobian_moments_analytic(
    cfg: NetworkConfig, q_star: float, rule: Optional[GaussQuadRule] = None
) -> SpectrumMoments:
    """First two moments of the ``J J^T`` spectrum from free multiplicativity.

    ``m1 = (gamma sigma_alpha2 mu1)^L`` and
    ``m2 = m1^2 (1 + L (mu2 / mu1^2 - 1 - s1))`` where
    ``mu_k = int phi'(sqrt(q*) z)^(2k) Dz``.
    """
    if not q_star >= 0:
        raise DomainError(f"q_star must be >= 0, got {q_star}")
    mu1 = dphi_moment(cfg.activation, q_star, 1, rule)
    if mu1 == 0.0:
        raise DegenerateSpectrum("mu1 = 0: the Jacobian spectrum collapses to zero")
    mu2 = dphi_moment(cfg.activation, q_star, 2, rule)
    L = cfg.depth
    s1 = s1_coefficient(cfg.ensemble, cfg.gamma)
    m1 = (cfg.weight_var * mu1) ** L
    spread = L * (mu2 / (mu1 * mu1) - 1.0 - s1)
    return SpectrumMoments(m1=m1, m2=m1 * m1 * (1.0 + spread), source="analytic", depth=L)
