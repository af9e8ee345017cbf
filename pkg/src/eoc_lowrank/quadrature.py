"""Gaussian-measure integrals.

``Dz`` below is the standard normal measure. One-dimensional integrals use
probabilists' Gauss-Hermite rules built by the Golub-Welsch method; the
correlated two-dimensional integrals are tensor-product rules in the
whitened variables. Integrands with a kink at the origin (relu) get
split rules instead: a half-line rule on each side of the kink in 1-D, and
polar coordinates with the angle split along the kink lines in 2-D.
``mc_oracle`` is an independent Monte-Carlo estimator used to validate all
of them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.special import roots_legendre

from eoc_lowrank.errors import DomainError, NonFiniteIntegrand

DEFAULT_ORDER = 61
# beyond this |c| is treated as exactly +-1 (u2 = +-u1)
DEGENERATE_CORRELATION = 1.0 - 1e-12
HALF_LINE_CUTOFF = 12.0
HALF_LINE_PANELS = 24


@lru_cache(maxsize=32)
def _golub_welsch(order: int) -> tuple[np.ndarray, np.ndarray]:
    # He_{k+1}(x) = x He_k(x) - k He_{k-1}(x): zero diagonal, sqrt(k) off-diagonal
    off = np.sqrt(np.arange(1, order, dtype=float))
    nodes = eigh_tridiagonal(np.zeros(order), off, eigvals_only=True)
    # Christoffel weights 1 / sum_k p_k(x)^2 with orthonormal p_k; unlike the
    # squared first eigenvector components they keep full relative accuracy
    # in the tails, where those components underflow
    p_prev = np.zeros(order)
    p = np.ones(order)
    total = p * p
    for k in range(1, order):
        p_prev, p = p, (nodes * p - math.sqrt(k - 1) * p_prev) / math.sqrt(k)
        total += p * p
    weights = 1.0 / total
    weights = weights / weights.sum()
    # exact symmetry of the rule removes odd-moment round-off
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


@dataclass(frozen=True)
class GaussQuadRule:
    """Probabilists' Gauss-Hermite rule with weights summing to one.

    ``sum(w * f(z))`` approximates ``int f(z) Dz`` and is exact for
    polynomials of degree up to ``2 * order - 1``.
    """

    order: int = DEFAULT_ORDER
    nodes: np.ndarray = field(init=False, repr=False, compare=False)
    weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.order) != self.order or self.order < 1:
            raise DomainError(f"quadrature order must be a positive integer, got {self.order}")
        nodes, weights = _golub_welsch(int(self.order))
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)


@lru_cache(maxsize=32)
def get_rule(order: int = DEFAULT_ORDER) -> GaussQuadRule:
    """Cached rule for ``order``."""
    return GaussQuadRule(order)


def _check_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteIntegrand(f"{what} returned a non-finite value on a quadrature node")


def gauss_1d(rule: GaussQuadRule, f: Callable[[np.ndarray], np.ndarray]) -> float:
    """Approximate ``int f(z) Dz`` by ``sum_i w_i f(z_i)``.

    ``f`` is called once with the full node array.
    """
    vals = np.broadcast_to(np.asarray(f(rule.nodes), dtype=float), rule.nodes.shape)
    _check_finite(vals, "integrand")
    return float(np.dot(rule.weights, vals))


def gauss_2d_correlated(
    rule: GaussQuadRule,
    f: Callable[[np.ndarray, np.ndarray], np.ndarray],
    q11: float,
    q22: float,
    c: float,
) -> float:
    """Approximate ``int int f(u1, u2) Dz1 Dz2`` for correlated Gaussians.

    Here ``u1 = sqrt(q11) z1`` and
    ``u2 = sqrt(q22) (c z1 + sqrt(1 - c^2) z2)``, so ``(u1, u2)`` has
    variances ``q11``, ``q22`` and correlation ``c``. For ``|c|`` within
    1e-12 of one the exact degenerate form ``u2 = sign(c) sqrt(q22) z1``
    is used.
    """
    if not q11 > 0 or not q22 > 0:
        raise DomainError(f"variances must be positive, got q11={q11}, q22={q22}")
    if not abs(c) <= 1.0:
        raise DomainError(f"correlation must lie in [-1, 1], got {c}")
    z, w = rule.nodes, rule.weights
    s1, s2 = np.sqrt(q11), np.sqrt(q22)
    u1 = s1 * z
    if abs(c) > DEGENERATE_CORRELATION:
        vals = np.broadcast_to(np.asarray(f(u1, np.copysign(1.0, c) * s2 * z), dtype=float), z.shape)
        _check_finite(vals, "integrand")
        return float(np.dot(w, vals))
    z1 = z[:, None]
    z2 = z[None, :]
    u2 = s2 * (c * z1 + np.sqrt(1.0 - c * c) * z2)
    vals = np.broadcast_to(np.asarray(f(s1 * z1, u2), dtype=float), (z.size, z.size))
    _check_finite(vals, "integrand")
    return float(w @ vals @ w)


@lru_cache(maxsize=16)
def _half_line_panels(order: int) -> tuple[np.ndarray, np.ndarray]:
    # composite Gauss-Legendre on [0, HALF_LINE_CUTOFF]; the Gaussian tail
    # beyond the cutoff is below 1e-31
    x, w = roots_legendre(max(8, -(-order // 4)))
    edges = np.linspace(0.0, HALF_LINE_CUTOFF, HALF_LINE_PANELS + 1)
    half = 0.5 * np.diff(edges)[:, None]
    mid = 0.5 * (edges[:-1] + edges[1:])[:, None]
    return (mid + half * x).ravel(), (half * w).ravel()


@lru_cache(maxsize=16)
def _half_line_rule(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for ``int_0^inf g(z) Dz``."""
    z, w = _half_line_panels(order)
    return z, w * np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


@lru_cache(maxsize=16)
def _polar_rules(order: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    # radius with density rho e^(-rho^2/2); angle Gauss-Legendre per arc
    rho, w = _half_line_panels(order)
    x, wa = roots_legendre(order)
    return rho, w * rho * np.exp(-0.5 * rho * rho), x, wa


def gauss_1d_kinked(rule: GaussQuadRule, f: Callable[[np.ndarray], np.ndarray]) -> float:
    """``int f(z) Dz`` for ``f`` smooth on each side of a kink at ``z = 0``.

    Each half-line gets a composite Gauss-Legendre rule (``rule.order`` sets
    the nodes per panel), which converges spectrally for integrands that
    are smooth on either side of the kink.
    """
    z, w = _half_line_rule(rule.order)
    vals = np.asarray(f(z), dtype=float) + np.asarray(f(-z), dtype=float)
    vals = np.broadcast_to(vals, z.shape)
    _check_finite(vals, "integrand")
    return float(np.dot(w, vals))


def gauss_2d_kinked(
    rule: GaussQuadRule,
    f: Callable[[np.ndarray, np.ndarray], np.ndarray],
    q11: float,
    q22: float,
    c: float,
) -> float:
    """:func:`gauss_2d_correlated` for integrands with kinks along ``u1 = 0`` and ``u2 = 0``.

    Works in polar coordinates of the whitened variables; the angular range
    is cut at the four directions where ``u1`` or ``u2`` vanishes so each
    arc sees a smooth integrand.
    """
    if not q11 > 0 or not q22 > 0:
        raise DomainError(f"variances must be positive, got q11={q11}, q22={q22}")
    if not abs(c) <= 1.0:
        raise DomainError(f"correlation must lie in [-1, 1], got {c}")
    s1, s2 = math.sqrt(q11), math.sqrt(q22)
    if abs(c) > DEGENERATE_CORRELATION:
        sign = math.copysign(1.0, c)
        return gauss_1d_kinked(rule, lambda z: f(s1 * z, sign * s2 * z))
    sc = math.sqrt(1.0 - c * c)
    rho, wr, x, wa = _polar_rules(rule.order)
    # u1 = 0 at theta = pi/2 (mod pi); u2 = 0 where c cos + sc sin = 0
    base = math.atan2(-c, sc)
    cuts = np.sort(np.mod([0.5 * math.pi, 1.5 * math.pi, base, base + math.pi], 2.0 * math.pi))
    edges = np.concatenate([cuts, [cuts[0] + 2.0 * math.pi]])
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        if b - a <= 0.0:
            continue
        theta = 0.5 * (b - a) * x + 0.5 * (a + b)
        wt = 0.5 * (b - a) * wa / (2.0 * math.pi)
        z1 = rho[:, None] * np.cos(theta)[None, :]
        z2 = rho[:, None] * np.sin(theta)[None, :]
        vals = np.broadcast_to(np.asarray(f(s1 * z1, s2 * (c * z1 + sc * z2)), dtype=float), z1.shape)
        _check_finite(vals, "integrand")
        total += float(wr @ vals @ wt)
    return total


def mc_oracle(
    f: Callable,
    c: Optional[float] = None,
    samples: int = 1_000_000,
    seed: int = 0,
    q11: float = 1.0,
    q22: float = 1.0,
    chunk: int = 1_000_000,
) -> tuple[float, float]:
    """Monte-Carlo estimate of the same Gaussian integrals, with its standard error.

    With ``c=None`` estimates ``E f(z)`` for ``z ~ N(0, 1)``. Otherwise
    estimates ``E f(u1, u2)`` with the correlated variables of
    :func:`gauss_2d_correlated`. Samples are drawn in chunks so 1e7-sample
    runs stay within modest memory; the result depends only on ``seed``.

    Returns
    -------
    estimate, stderr : float
    """
    if samples < 1:
        raise DomainError(f"samples must be >= 1, got {samples}")
    if c is not None and not abs(c) <= 1.0:
        raise DomainError(f"correlation must lie in [-1, 1], got {c}")
    rng = np.random.default_rng(seed)
    total = 0.0
    total_sq = 0.0
    remaining = samples
    while remaining > 0:
        n = min(chunk, remaining)
        if c is None:
            vals = np.asarray(f(rng.standard_normal(n)), dtype=float)
        else:
            z1 = rng.standard_normal(n)
            z2 = rng.standard_normal(n)
            u1 = np.sqrt(q11) * z1
            u2 = np.sqrt(q22) * (c * z1 + np.sqrt(max(0.0, 1.0 - c * c)) * z2)
            vals = np.asarray(f(u1, u2), dtype=float)
        vals = np.broadcast_to(vals, (n,))
        if not np.all(np.isfinite(vals)):
            raise NonFiniteIntegrand("integrand returned a non-finite value on a sample")
        total += float(vals.sum())
        total_sq += float(np.dot(vals, vals))
        remaining -= n
    mean = total / samples
    if samples == 1:
        return mean, 0.0
    var = max(0.0, (total_sq - samples * mean * mean) / (samples - 1))
    return mean, float(np.sqrt(var / samples))
