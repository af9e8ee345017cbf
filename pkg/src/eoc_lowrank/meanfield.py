"""Infinite-width signal propagation in low-rank networks.

The length map is

    V(q) = gamma * (sigma_alpha2 * int phi(sqrt(q) z)^2 Dz + sigma_b2)

and the covariance map replaces ``phi^2`` by ``phi(u1) phi(u2)`` for
correlated Gaussians ``(u1, u2)``. Both depend on ``(gamma, sigma_alpha2,
sigma_b2)`` only through ``gamma*sigma_alpha2`` and ``gamma*sigma_b2``, so
every quantity here is the full-rank one at rescaled variances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import brentq

from eoc_lowrank.activations import ActivationFamily, get_activation
from eoc_lowrank.config import NetworkConfig
from eoc_lowrank.errors import DomainError, NoConvergence, NonPositiveLogArgument
from eoc_lowrank.quadrature import (
    DEGENERATE_CORRELATION,
    GaussQuadRule,
    gauss_1d,
    gauss_1d_kinked,
    gauss_2d_correlated,
    gauss_2d_kinked,
    get_rule,
)
from eoc_lowrank.records import TrajectoryRecord

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 10_000
DAMPING_AFTER = 200
DAMPING = 0.5
# |chi - 1| below this is the edge of chaos: infinite depth scales, phase "critical"
CRITICAL_TOL = 1e-10
_DIVERGED = 1e100


@dataclass(frozen=True)
class FixedPointReport:
    """Fixed points of the length and correlation maps.

    ``c_star`` and ``chi`` are ``None`` when only the length fixed point was
    solved for. ``iterations`` and ``residual`` refer to the length map.
    """

    q_star: float
    c_star: Optional[float]
    chi: Optional[float]
    iterations: int
    residual: float
    damped: bool = False

    @property
    def phase(self) -> Optional[str]:
        return None if self.chi is None else phase_of(self.chi)


@dataclass(frozen=True)
class DepthScales:
    """e-folding lengths (in layers) of perturbations; ``inf`` at criticality."""

    xi_q: float
    xi_c: float
    xi_grad: float


@dataclass(frozen=True)
class EocPoint:
    """One point of the edge-of-chaos curve in gamma-rescaled axes."""

    weight_var: float
    bias_var: float
    q_star: float


def _rule(rule: Optional[GaussQuadRule]) -> GaussQuadRule:
    return rule if rule is not None else get_rule()


def phase_of(chi_value: float) -> str:
    if abs(chi_value - 1.0) <= CRITICAL_TOL:
        return "critical"
    return "ordered" if chi_value < 1.0 else "chaotic"


def _gauss_moment(activation: ActivationFamily, q: float, integrand, rule: GaussQuadRule) -> float:
    s = math.sqrt(q)
    # C0 families have their kink at the origin; a plain Gauss-Hermite sum
    # converges slowly across it
    integrate = gauss_1d if activation.smoothness == "C2" else gauss_1d_kinked
    return integrate(rule, lambda z: integrand(s * z))


def phi_sq_integral(activation, q: float, rule: Optional[GaussQuadRule] = None) -> float:
    """``int phi(sqrt(q) z)^2 Dz``."""
    act = get_activation(activation)
    phi = act.phi
    return _gauss_moment(act, q, lambda u: np.square(phi(u)), _rule(rule))


def dphi_moment(activation, q: float, k: int = 1, rule: Optional[GaussQuadRule] = None) -> float:
    """``mu_k = int phi'(sqrt(q) z)^(2k) Dz``."""
    act = get_activation(activation)
    dphi = act.dphi
    return _gauss_moment(act, q, lambda u: np.square(dphi(u)) ** k, _rule(rule))


def length_map(cfg: NetworkConfig, q_prev: float, rule: Optional[GaussQuadRule] = None) -> float:
    """One step of the length recursion ``q -> V(q)``."""
    if not q_prev >= 0.0:
        raise DomainError(f"q_prev must be >= 0, got {q_prev}")
    return cfg.weight_var * phi_sq_integral(cfg.activation, q_prev, rule) + cfg.bias_var


def covariance_map(
    cfg: NetworkConfig, q11: float, q22: float, q12: float, rule: Optional[GaussQuadRule] = None
) -> float:
    """Next-layer covariance of two inputs with lengths q11, q22 and covariance q12."""
    if not (q11 > 0.0 and q22 > 0.0):
        raise DomainError(f"q11 and q22 must be positive, got {q11}, {q22}")
    bound = math.sqrt(q11 * q22)
    if not abs(q12) <= bound * (1.0 + 1e-12):
        raise DomainError(f"|q12|={abs(q12)} exceeds sqrt(q11*q22)={bound}")
    c = min(1.0, max(-1.0, q12 / bound))
    phi = cfg.activation.phi
    integrate = gauss_2d_correlated if cfg.activation.smoothness == "C2" else gauss_2d_kinked
    integral = integrate(_rule(rule), lambda u1, u2: phi(u1) * phi(u2), q11, q22, c)
    return cfg.weight_var * integral + cfg.bias_var


def correlation_map(
    cfg: NetworkConfig, q_star: float, c_prev: float, rule: Optional[GaussQuadRule] = None
) -> float:
    """Correlation recursion with both lengths held at the fixed point ``q_star``.

    ``c_prev = 1`` (or anything within 1e-12 of it) maps to exactly 1.
    """
    if not q_star > 0.0:
        raise DomainError(f"q_star must be positive, got {q_star}")
    if not abs(c_prev) <= 1.0:
        raise DomainError(f"c_prev must lie in [-1, 1], got {c_prev}")
    if c_prev > DEGENERATE_CORRELATION:
        return 1.0
    return covariance_map(cfg, q_star, q_star, c_prev * q_star, rule) / q_star


def chi(cfg: NetworkConfig, q_star: float, rule: Optional[GaussQuadRule] = None) -> float:
    """Slope of the correlation map at c = 1: ``gamma sigma_alpha2 int phi'(sqrt(q*) z)^2 Dz``."""
    if not q_star >= 0.0:
        raise DomainError(f"q_star must be >= 0, got {q_star}")
    return cfg.weight_var * dphi_moment(cfg.activation, q_star, 1, rule)


def _picard(step, x0, tol, max_iter, what):
    x = x0
    damped = False
    delta = math.inf
    for it in range(1, max_iter + 1):
        x_new = step(x)
        delta = x_new - x
        if damped:
            x_new = x + DAMPING * delta
        if not math.isfinite(x_new) or abs(x_new) > _DIVERGED:
            raise NoConvergence(f"{what} iteration diverged", last=x_new, step=delta, iterations=it)
        x = x_new
        if abs(delta) <= tol:
            return x, it, damped
        if it == DAMPING_AFTER:
            damped = True
    raise NoConvergence(
        f"{what} iteration did not converge in {max_iter} steps (last step {delta:.3e})",
        last=x, step=delta, iterations=max_iter,
    )


def _origin_attracts(cfg: NetworkConfig, rule: GaussQuadRule) -> bool:
    act = cfg.activation
    if cfg.bias_var != 0.0 or float(act.phi(0.0)) != 0.0:
        return False
    eps = 1e-10
    # V(q) <= V'(0) q for every family offered here, so slope <= 1 means q* = 0
    slope0 = length_map(cfg, eps, rule) / eps
    return slope0 <= 1.0 + 1e-12


def _bracketed_q_star(step, exc: NoConvergence, tol: float) -> float:
    last = exc.diagnostics.get("last", math.nan)
    if not (math.isfinite(last) and abs(last) <= _DIVERGED and step(0.0) > 0.0):
        raise exc
    hi = max(2.0 * last, 1.0)
    while step(hi) >= hi:
        hi *= 2.0
        if hi > _DIVERGED:
            raise exc
    q, info = brentq(lambda q: step(q) - q, 0.0, hi, xtol=tol, full_output=True, disp=False)
    if not info.converged:
        raise exc
    return float(q)


def solve_q_star(
    cfg: NetworkConfig,
    q_init: float = 1.0,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    rule: Optional[GaussQuadRule] = None,
) -> FixedPointReport:
    """Fixed point of the length map by Picard iteration.

    Damping by 0.5 switches on after 200 undamped steps. If the budget runs
    out while steps are already below ``sqrt(tol)`` and the bias is
    positive, the root of ``V(q) - q`` is bracketed on ``[0, hi]`` and found
    by Brent's method instead. With zero bias and
    ``phi(0) = 0`` the origin is returned directly whenever it attracts,
    since convergence to it is only algebraic at criticality.

    Raises
    ------
    NoConvergence
        After ``max_iter`` steps or on divergence; ``diagnostics`` carries the
        last iterate.
    """
    rule = _rule(rule)
    if not tol > 0:
        raise DomainError(f"tol must be positive, got {tol}")
    if not q_init >= 0.0:
        raise DomainError(f"q_init must be >= 0, got {q_init}")
    if _origin_attracts(cfg, rule):
        return FixedPointReport(0.0, None, None, 0, abs(length_map(cfg, 0.0, rule)))
    if q_init == 0.0 and cfg.bias_var == 0.0:
        q_init = 1.0
    step = lambda q: length_map(cfg, q, rule)
    try:
        q, iterations, damped = _picard(step, q_init, tol, max_iter, "length map")
    except NoConvergence as exc:
        # near criticality the approach is algebraic; a stalled run falls back to a bracketed root
        if not abs(exc.diagnostics.get("step", math.inf)) <= math.sqrt(tol):
            raise
        q = _bracketed_q_star(step, exc, tol)
        iterations, damped = max_iter, True
    residual = abs(length_map(cfg, q, rule) - q)
    return FixedPointReport(q, None, None, iterations, residual, damped)


def solve_c_star(
    cfg: NetworkConfig,
    q_star: float,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    rule: Optional[GaussQuadRule] = None,
) -> float:
    """Stable fixed point of the correlation map.

    Returns 1 in the ordered and critical phases. In the chaotic phase the
    map lies above the diagonal at the lower end of its range and below it
    just left of ``c = 1`` (its slope there is chi > 1), so the interior
    fixed point is bracketed and found by Brent's method. Plain iteration
    would crawl when chi is barely above 1, where c* sits next to 1.
    """
    rule = _rule(rule)
    chi_value = chi(cfg, q_star, rule)
    if chi_value <= 1.0 + CRITICAL_TOL:
        return 1.0
    if not q_star > 0.0:
        raise DomainError("a chaotic configuration needs q_star > 0")

    def gap(c):
        return correlation_map(cfg, q_star, c, rule) - c

    # for odd maps without bias c = 0 is a fixed point and rounding can put
    # gap(0) on either side; look just above it, then accept 0 itself
    lo = next((c for c in (0.0, 1e-8, 1e-4, 1e-2, 0.1) if gap(c) > 0.0), None)
    if lo is None:
        if abs(gap(0.0)) <= tol:
            return 0.0
        lo = -1.0
    if gap(lo) <= 0.0:
        raise NoConvergence("no lower bracket for the correlation fixed point",
                            last=lo, step=math.nan, iterations=0)
    delta = 0.5
    while gap(1.0 - delta) >= 0.0:
        delta *= 0.25
        if delta < 1e-13:
            raise NoConvergence("no interior correlation fixed point found below c = 1",
                                last=1.0 - delta, step=delta, iterations=0)
    c, info = brentq(gap, lo, 1.0 - delta, xtol=tol, rtol=4 * np.finfo(float).eps,
                     maxiter=max_iter, full_output=True, disp=False)
    if not info.converged:
        raise NoConvergence("correlation fixed point bracket did not converge",
                            last=c, step=math.nan, iterations=info.iterations)
    return float(c)


def fixed_point(
    cfg: NetworkConfig,
    q_init: float = 1.0,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    rule: Optional[GaussQuadRule] = None,
) -> FixedPointReport:
    """q*, c* and chi in one report."""
    rule = _rule(rule)
    rep = solve_q_star(cfg, q_init, tol, max_iter, rule)
    chi_value = chi(cfg, rep.q_star, rule)
    c_star = solve_c_star(cfg, rep.q_star, tol, max_iter, rule)
    return FixedPointReport(rep.q_star, c_star, chi_value, rep.iterations, rep.residual, rep.damped)


def eoc_curve(
    activation, gamma: float, q_grid: Iterable[float], rule: Optional[GaussQuadRule] = None
) -> list[EocPoint]:
    """Edge-of-chaos curve parametrised by the fixed point q*.

    For each q* the weight variance is chosen so that chi = 1 and the bias
    variance so that q* is a fixed point. Points needing a negative bias
    variance are dropped; consecutive duplicates (the identity activation
    collapses to a single point) are merged.
    """
    act = get_activation(activation)
    act.require_c2()
    if not 0.0 < gamma <= 1.0:
        raise DomainError(f"gamma must lie in (0, 1], got {gamma}")
    rule = _rule(rule)
    points: list[EocPoint] = []
    for q in q_grid:
        q = float(q)
        if not q > 0.0:
            raise DomainError(f"q grid values must be positive, got {q}")
        wv = 1.0 / dphi_moment(act, q, 1, rule)
        bv = q - wv * phi_sq_integral(act, q, rule)
        if bv < 0.0:
            if bv < -1e-12 * max(1.0, q):
                continue
            bv = 0.0
        if points and abs(points[-1].weight_var - wv) <= 1e-12 and abs(points[-1].bias_var - bv) <= 1e-12:
            continue
        points.append(EocPoint(wv, bv, q))
    return points


def _log_scale(x: float, what: str) -> float:
    if not x > 0.0:
        raise NonPositiveLogArgument(f"{what}: log argument {x} is not positive", argument=x)
    if abs(x - 1.0) <= CRITICAL_TOL:
        return math.inf
    return 1.0 / abs(math.log(x))


def depth_scales(cfg: NetworkConfig, q_star: float, rule: Optional[GaussQuadRule] = None) -> DepthScales:
    """Length, correlation and gradient depth scales at the fixed point.

    The scales are reported as magnitudes ``1 / |log x|`` so they are
    positive in both phases; the phase itself is carried by chi.
    """
    act = cfg.activation
    act.require_c2()
    rule = _rule(rule)
    chi_value = chi(cfg, q_star, rule)
    s = math.sqrt(q_star)
    curvature = gauss_1d(rule, lambda z: act.d2phi(s * z) * act.phi(s * z))
    xi_c = _log_scale(chi_value, "correlation depth scale")
    xi_q = _log_scale(chi_value + cfg.weight_var * curvature, "length depth scale")
    return DepthScales(xi_q=xi_q, xi_c=xi_c, xi_grad=xi_c)


def gradient_norm_theory(
    cfg: NetworkConfig,
    q_star: float,
    layers: Optional[Sequence[int]] = None,
    rule: Optional[GaussQuadRule] = None,
) -> TrajectoryRecord:
    """Predicted ``q~^l / q~^L = chi^(L - l)`` for constant width."""
    L = cfg.depth
    if layers is None:
        layers = range(1, L + 1)
    layers = np.asarray(list(layers), dtype=int)
    chi_value = chi(cfg, q_star, rule)
    values = chi_value ** (L - layers).astype(float)
    return TrajectoryRecord("gradient_ratio", layers, values, {"chi": chi_value, "depth": L})


def length_trajectory(
    cfg: NetworkConfig, q0: float, layers: int, rule: Optional[GaussQuadRule] = None
) -> TrajectoryRecord:
    """Iterate the length map from ``q0`` for ``layers`` steps (layer 0 included)."""
    qs = [float(q0)]
    for _ in range(layers):
        qs.append(length_map(cfg, qs[-1], rule))
    return TrajectoryRecord("length", np.arange(layers + 1), qs)


def correlation_trajectory(
    cfg: NetworkConfig, q0: float, c0: float, layers: int, rule: Optional[GaussQuadRule] = None
) -> TrajectoryRecord:
    """Iterate the joint length/covariance maps for a pair with equal input lengths.

    Unlike :func:`correlation_map` this does not assume the lengths already
    sit at q*; with ``q0 = q*`` the two coincide.
    """
    rule = _rule(rule)
    q = float(q0)
    c = float(c0)
    cs = [c]
    for _ in range(layers):
        if c > DEGENERATE_CORRELATION:
            q = length_map(cfg, q, rule)
            c = 1.0
        else:
            q_next = length_map(cfg, q, rule)
            q12 = covariance_map(cfg, q, q, c * q, rule)
            c = min(1.0, max(-1.0, q12 / q_next))
            q = q_next
        cs.append(c)
    return TrajectoryRecord("correlation", np.arange(layers + 1), cs, {"q0": q0})


def weight_var_for_chi(
    activation,
    bias_var: float,
    target_chi: float = 1.0,
    bracket: tuple[float, float] = (1e-3, 50.0),
    rule: Optional[GaussQuadRule] = None,
) -> float:
    """Solve for ``gamma*sigma_alpha2`` giving slope ``target_chi`` at the fixed point.

    ``bias_var`` is ``gamma*sigma_b2``. Works in full-rank-equivalent units,
    so the answer holds for every gamma.
    """
    rule = _rule(rule)
    act = get_activation(activation)

    def gap(wv):
        cfg = NetworkConfig(gamma=1.0, sigma_alpha2=wv, sigma_b2=bias_var, activation=act, width=1)
        q = solve_q_star(cfg, rule=rule).q_star
        return chi(cfg, q, rule) - target_chi

    return brentq(gap, *bracket, xtol=1e-14, rtol=1e-13)
