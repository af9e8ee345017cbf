"""Finite-width Monte-Carlo simulator of low-rank feedforward networks.

Layer ``l`` has weights ``W = C A`` where ``C`` (N x r) has orthonormal
columns and ``A`` (r x N) holds the trainable coefficients. Preactivations
follow ``h^l = C (A phi(h^{l-1}) + beta^l)`` where ``beta^l`` is the bias
expressed in frame coordinates.

The input to every run is a preactivation ``h^0`` with prescribed squared
length ``q0 = |h^0|^2 / N``; the network sees ``z^0 = phi(h^0)``. This
keeps the empirical trajectories aligned with the iterated maps, whose
first step is ``q^1 = V(q^0)``.

Randomness: each (trial, layer) pair owns an independent generator derived
from the root seed through ``numpy.random.SeedSequence`` spawn keys, so a
trial's output depends only on ``(seed, trial)`` and trials can run in any
order or in parallel.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from eoc_lowrank import meanfield
from eoc_lowrank.config import NetworkConfig, rank_for
from eoc_lowrank.errors import DomainError, NumericalOverflow
from eoc_lowrank.records import SpectrumMoments, TrajectoryRecord

BIAS_MODES = ("shared", "per_direction")
DEFAULT_BIAS_MODE = "shared"
RESCALE_EVERY = 8
INPUT_LAYER = 0
THREADS_ENV = "EOC_LOWRANK_THREADS"


def substream(seed: int, trial: int, layer: int) -> np.random.Generator:
    """Independent generator for one (trial, layer) slot of a run."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(trial, layer))))


@dataclass
class LowRankWeights:
    """``W = frame @ coeffs`` with ``frame^T frame = I_r``."""

    frame: np.ndarray
    coeffs: np.ndarray
    ensemble: str

    @property
    def rank(self) -> int:
        return self.frame.shape[1]

    @property
    def matrix(self) -> np.ndarray:
        return self.frame @ self.coeffs

    def __matmul__(self, x):
        return self.frame @ (self.coeffs @ x)

    def rmatmul_T(self, y):
        """``W^T y`` without forming W."""
        return self.coeffs.T @ (self.frame.T @ y)


@dataclass
class LowRankLayer:
    weights: LowRankWeights
    bias_coeffs: np.ndarray  # length r, bias = frame @ bias_coeffs

    def preactivation(self, z: np.ndarray) -> np.ndarray:
        w = self.weights
        # overflow is detected by the callers and reported with the layer index
        with np.errstate(over="ignore", invalid="ignore"):
            inner = w.coeffs @ z
            if inner.ndim == 2:
                inner = inner + self.bias_coeffs[:, None]
            else:
                inner = inner + self.bias_coeffs
            return w.frame @ inner


def haar_frame(n: int, r: int, rng: np.random.Generator) -> np.ndarray:
    """n x r matrix with orthonormal columns, Haar-distributed on the Stiefel manifold.

    QR of an i.i.d. Gaussian matrix with the signs fixed so R has a positive
    diagonal.
    """
    g = rng.standard_normal((n, r))
    q, rr = np.linalg.qr(g)
    signs = np.sign(np.diag(rr))
    signs[signs == 0] = 1.0
    return q * signs


def sample_weights(cfg: NetworkConfig, n_out: int, n_in: int, rng: np.random.Generator) -> LowRankWeights:
    """Draw one low-rank weight matrix.

    Gaussian ensemble: Haar frame and i.i.d. ``N(0, sigma_alpha2 / n_in)``
    coefficients. Orthogonal ensemble (square only): ``sigma_alpha * C P^T``
    for a Haar frame ``C`` and a random coordinate injection ``P``, so
    ``W^T W`` is ``sigma_alpha2`` on r random coordinates and 0 elsewhere.
    """
    r = rank_for(cfg.gamma, n_out)
    if not 1 <= r <= min(n_out, n_in):
        raise DomainError(f"rank {r} outside [1, min(n_out, n_in)={min(n_out, n_in)}]")
    frame = haar_frame(n_out, r, rng)
    if cfg.ensemble == "lowrank_gaussian":
        coeffs = rng.standard_normal((r, n_in)) * math.sqrt(cfg.sigma_alpha2 / n_in)
    else:
        if n_in != n_out:
            raise DomainError("the orthogonal ensemble needs n_in == n_out")
        cols = rng.permutation(n_in)[:r]
        coeffs = np.zeros((r, n_in))
        coeffs[np.arange(r), cols] = math.sqrt(cfg.sigma_alpha2)
    return LowRankWeights(frame, coeffs, cfg.ensemble)


def sample_layer(cfg: NetworkConfig, rng: np.random.Generator, bias_mode: str = DEFAULT_BIAS_MODE) -> LowRankLayer:
    w = sample_weights(cfg, cfg.width, cfg.width, rng)
    sb = math.sqrt(cfg.sigma_b2)
    if bias_mode == "shared":
        bias = np.full(w.rank, sb * rng.standard_normal())
    elif bias_mode == "per_direction":
        bias = sb * rng.standard_normal(w.rank)
    else:
        raise DomainError(f"bias_mode must be one of {BIAS_MODES}, got {bias_mode!r}")
    return LowRankLayer(w, bias)


class LowRankNetwork:
    """A sampled network: one :class:`LowRankLayer` per depth."""

    def __init__(self, cfg: NetworkConfig, layers: list[LowRankLayer]):
        self.cfg = cfg
        self.layers = layers

    @classmethod
    def sample(cls, cfg: NetworkConfig, seed: int = 0, trial: int = 0,
               bias_mode: str = DEFAULT_BIAS_MODE) -> "LowRankNetwork":
        layers = [sample_layer(cfg, substream(seed, trial, l), bias_mode) for l in range(1, cfg.depth + 1)]
        return cls(cfg, layers)

    def forward(self, h0: np.ndarray) -> list[np.ndarray]:
        """Preactivations ``[h^0, h^1, ..., h^L]``."""
        phi = self.cfg.activation.phi
        hs = [np.asarray(h0, dtype=float)]
        for l, layer in enumerate(self.layers, start=1):
            h = layer.preactivation(phi(hs[-1]))
            _check_finite(h, l)
            hs.append(h)
        return hs

    def loss(self, h0: np.ndarray) -> float:
        """Synthetic loss ``E = |h^L|^2 / 2``."""
        hL = self.forward(h0)[-1]
        return 0.5 * float(hL @ hL)

    def alpha_gradients(self, h0: np.ndarray) -> list[np.ndarray]:
        """Exact ``dE/dA^(l)`` for every layer, by backpropagation.

        ``dE/dalpha_ij = (C^T delta^l)_i phi(h^{l-1})_j`` with
        ``delta^L = h^L`` and ``delta^{l-1} = (W^l)^T delta^l * phi'(h^{l-1})``.
        """
        phi, dphi = self.cfg.activation.phi, self.cfg.activation.dphi
        hs = self.forward(h0)
        grads = [None] * len(self.layers)
        delta = hs[-1]
        for l in range(len(self.layers), 0, -1):
            w = self.layers[l - 1].weights
            g = w.frame.T @ delta
            grads[l - 1] = np.outer(g, phi(hs[l - 1]))
            delta = (w.coeffs.T @ g) * dphi(hs[l - 1])
        return grads


def _check_finite(x: np.ndarray, layer: int) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericalOverflow(f"non-finite preactivations at layer {layer}", layer=layer)


def make_input(width: int, q0: float, rng: np.random.Generator) -> np.ndarray:
    """Random preactivation with ``|h|^2 / N = q0`` exactly."""
    v = rng.standard_normal(width)
    return v * math.sqrt(q0 * width) / np.linalg.norm(v)


def make_input_pair(width: int, q0: float, c0: float, rng: np.random.Generator) -> np.ndarray:
    """Two inputs (columns) with squared lengths ``q0`` and correlation exactly ``c0``."""
    if not -1.0 <= c0 <= 1.0:
        raise DomainError(f"c0 must lie in [-1, 1], got {c0}")
    g = rng.standard_normal((width, 2))
    e, _ = np.linalg.qr(g)
    scale = math.sqrt(q0 * width)
    x1 = scale * e[:, 0]
    x2 = scale * (c0 * e[:, 0] + math.sqrt(1.0 - c0 * c0) * e[:, 1])
    if c0 == 1.0:
        x2 = x1.copy()
    return np.column_stack([x1, x2])


@dataclass
class ForwardRun:
    """Empirical layerwise statistics of one trial (layers 0..L)."""

    lengths: list[TrajectoryRecord]
    correlation: Optional[TrajectoryRecord]
    one_minus_c: Optional[np.ndarray]


@np.errstate(over="ignore", invalid="ignore")
def _pair_stats(h: np.ndarray) -> tuple[float, float, float, float]:
    n = h.shape[0]
    h1, h2 = h[:, 0], h[:, 1]
    q11 = float(h1 @ h1) / n
    q22 = float(h2 @ h2) / n
    d = h1 - h2
    d2 = float(d @ d) / n
    a, b = math.sqrt(q11), math.sqrt(q22)
    if a == 0.0 or b == 0.0:
        return q11, q22, math.nan, math.nan
    # 1 - c without cancellation: (|h1 - h2|^2 - (a - b)^2) / (2ab)
    gap = (q11 - q22) / (a + b)
    omc = (d2 - gap * gap) / (2.0 * a * b)
    return q11, q22, 1.0 - omc, omc


def forward_lengths(
    cfg: NetworkConfig,
    inputs: np.ndarray,
    seed: int = 0,
    trial: int = 0,
    bias_mode: str = DEFAULT_BIAS_MODE,
) -> ForwardRun:
    """Propagate one input (shape (N,)) or a pair (shape (N, 2)) through fresh layers.

    Records ``q^l`` for each input and, for pairs, ``c^l`` and ``1 - c^l``
    (the latter computed from ``h1 - h2`` so it stays accurate near c = 1).
    """
    phi = cfg.activation.phi
    h = np.asarray(inputs, dtype=float)
    pair = h.ndim == 2
    if h.shape[0] != cfg.width or (pair and h.shape[1] != 2):
        raise DomainError(f"inputs must have shape ({cfg.width},) or ({cfg.width}, 2), got {h.shape}")
    meta = {"seed": seed, "trial": trial, "width": cfg.width, "config": cfg.to_dict(), "bias_mode": bias_mode}
    qs1, qs2, cs, omcs = [], [], [], []

    def record(h):
        if pair:
            q11, q22, c, omc = _pair_stats(h)
            qs1.append(q11)
            qs2.append(q22)
            cs.append(c)
            omcs.append(omc)
        else:
            with np.errstate(over="ignore"):
                qs1.append(float(h @ h) / h.shape[0])

    record(h)
    for l in range(1, cfg.depth + 1):
        layer = sample_layer(cfg, substream(seed, trial, l), bias_mode)
        h = layer.preactivation(phi(h))
        _check_finite(h, l)
        record(h)
    layers = np.arange(cfg.depth + 1)
    if not pair:
        return ForwardRun([TrajectoryRecord("length", layers, qs1, meta)], None, None)
    return ForwardRun(
        [TrajectoryRecord("length", layers, qs1, meta), TrajectoryRecord("length", layers, qs2, meta)],
        TrajectoryRecord("correlation", layers, cs, meta),
        np.asarray(omcs),
    )


def _equilibrium_q(cfg: NetworkConfig, q0: Optional[float]) -> float:
    if q0 is not None:
        return float(q0)
    return meanfield.solve_q_star(cfg).q_star


def jacobian_spectrum(
    cfg: NetworkConfig,
    seed: int = 0,
    trial: int = 0,
    q0: Optional[float] = None,
    record_layers: Optional[Sequence[int]] = None,
    bias_mode: str = DEFAULT_BIAS_MODE,
) -> tuple[TrajectoryRecord, SpectrumMoments]:
    """Singular values of ``J = D^L W^L ... D^1 W^1`` and the moments of ``J J^T``.

    The input has squared length ``q0`` (default: the fixed point q*), so
    the network starts at equilibrium. The running product is divided by its
    largest entry every 8 layers and the logs of those factors are carried
    separately. ``record_layers`` selects depths whose full spectrum is kept
    (default: only the last).
    """
    L, n = cfg.depth, cfg.width
    q0 = _equilibrium_q(cfg, q0)
    record_at = set(record_layers) if record_layers is not None else {L}
    bad = [l for l in record_at if not 1 <= l <= L]
    if bad:
        raise DomainError(f"record_layers must lie in [1, {L}], got {sorted(bad)}")
    phi, dphi = cfg.activation.phi, cfg.activation.dphi
    h = make_input(n, q0, substream(seed, trial, INPUT_LAYER))
    J = np.eye(n)
    log_scale = 0.0
    spectra, layers_kept = [], []
    sv = None
    for l in range(1, L + 1):
        layer = sample_layer(cfg, substream(seed, trial, l), bias_mode)
        h = layer.preactivation(phi(h))
        _check_finite(h, l)
        J = dphi(h)[:, None] * (layer.weights @ J)
        if l % RESCALE_EVERY == 0 or l == L or l in record_at:
            s = float(np.max(np.abs(J)))
            if not math.isfinite(s):
                raise NumericalOverflow(f"Jacobian overflowed at layer {l}", layer=l)
            if s > 0.0:
                J /= s
                log_scale += math.log(s)
        if l in record_at:
            sv = np.linalg.svd(J, compute_uv=False)
            vals = sv * math.exp(log_scale) if log_scale < 700 else np.full_like(sv, math.inf)
            if not np.all(np.isfinite(vals)):
                raise NumericalOverflow(f"singular values overflow at layer {l}", layer=l)
            spectra.append(vals)
            layers_kept.append(l)
    if sv is None or layers_kept[-1] != L:
        sv = np.linalg.svd(J, compute_uv=False)
    lam = sv * sv
    m1 = math.exp(2.0 * log_scale) * float(np.mean(lam))
    m2 = math.exp(4.0 * log_scale) * float(np.mean(lam * lam))
    if not (math.isfinite(m1) and math.isfinite(m2)):
        raise NumericalOverflow("spectrum moments overflow", layer=L)
    record = TrajectoryRecord(
        "singular_spectrum", layers_kept, spectra,
        {"seed": seed, "trial": trial, "width": n, "config": cfg.to_dict(), "log_scale": log_scale},
    )
    return record, SpectrumMoments(m1, m2, "empirical", L)


def mean_sq_singular_per_layer(
    cfg: NetworkConfig,
    seed: int = 0,
    trial: int = 0,
    q0: Optional[float] = None,
    bias_mode: str = DEFAULT_BIAS_MODE,
) -> float:
    """``(1/N) tr((D W)(D W)^T)`` for one layer fed an equilibrium input."""
    q0 = _equilibrium_q(cfg, q0)
    n = cfg.width
    h_prev = make_input(n, q0, substream(seed, trial, INPUT_LAYER))
    layer = sample_layer(cfg, substream(seed, trial, 1), bias_mode)
    h = layer.preactivation(cfg.activation.phi(h_prev))
    W = layer.weights.matrix
    row_norms = np.einsum("ij,ij->i", W, W)
    return float(np.mean(np.square(cfg.activation.dphi(h)) * row_norms))


def backprop_gradient_norms(
    cfg: NetworkConfig,
    seed: int = 0,
    trial: int = 0,
    q0: Optional[float] = None,
    bias_mode: str = DEFAULT_BIAS_MODE,
) -> TrajectoryRecord:
    """``|grad_{A^(l)} E|^2`` for ``l = 1..L`` under the loss ``|h^L|^2 / 2``.

    Only the norms are formed: the gradient is the outer product
    ``(C^T delta) phi(h^{l-1})^T`` whose squared Frobenius norm factorises.
    """
    q0 = _equilibrium_q(cfg, q0)
    phi, dphi = cfg.activation.phi, cfg.activation.dphi
    net = LowRankNetwork.sample(cfg, seed, trial, bias_mode)
    h0 = make_input(cfg.width, q0, substream(seed, trial, INPUT_LAYER))
    hs = net.forward(h0)
    L = cfg.depth
    norms = np.empty(L)
    delta = hs[-1]
    for l in range(L, 0, -1):
        w = net.layers[l - 1].weights
        g = w.frame.T @ delta
        z = phi(hs[l - 1])
        norms[l - 1] = float(g @ g) * float(z @ z)
        delta = (w.coeffs.T @ g) * dphi(hs[l - 1])
        if not np.all(np.isfinite(delta)):
            raise NumericalOverflow(f"backpropagated signal overflowed at layer {l}", layer=l)
    return TrajectoryRecord(
        "gradient_norm", np.arange(1, L + 1), norms,
        {"seed": seed, "trial": trial, "width": cfg.width, "config": cfg.to_dict()},
    )


def fit_log_slope(layers: Sequence[float], values: Sequence[float]) -> float:
    """Least-squares slope of ``log(values)`` against ``layers``."""
    x = np.asarray(layers, dtype=float)
    y = np.log(np.asarray(values, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def correlation_decay_rate(
    cfg: NetworkConfig,
    c_star: float,
    q0: float,
    c0: float = 0.95,
    seed: int = 0,
    trial: int = 0,
    window: tuple[float, float] = (1e-12, 0.05),
    min_layer: int = 2,
    bias_mode: str = DEFAULT_BIAS_MODE,
) -> float:
    """Fitted rate ``k`` in ``|c^l - c*| ~ exp(-k l)`` for one trial.

    Only layers ``>= min_layer`` whose deviation lies inside ``window`` enter
    the fit: the lower edge keeps round-off out, the upper edge keeps the fit
    in the linearised regime. Returns nan with fewer than three usable layers.
    """
    pair = make_input_pair(cfg.width, q0, c0, substream(seed, trial, INPUT_LAYER))
    run = forward_lengths(cfg, pair, seed=seed, trial=trial, bias_mode=bias_mode)
    if c_star == 1.0:
        dev = run.one_minus_c
    else:
        dev = np.abs(run.correlation.values - c_star)
    layers = np.arange(dev.size)
    use = (layers >= min_layer) & (dev > window[0]) & (dev < window[1])
    if use.sum() < 3:
        return math.nan
    return -fit_log_slope(layers[use], dev[use])


def thread_count() -> int:
    """Worker count from ``EOC_LOWRANK_THREADS`` (0 or unset = one per CPU)."""
    raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise DomainError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 0:
        raise DomainError(f"{THREADS_ENV} must be >= 0, got {n}")
    return n if n > 0 else (os.cpu_count() or 1)


def run_trials(fn: Callable[[int], object], trials: int, threads: Optional[int] = None) -> list:
    """Evaluate ``fn(trial)`` for every trial; results come back in trial order."""
    threads = thread_count() if threads is None else threads
    if threads <= 1 or trials <= 1:
        return [fn(t) for t in range(trials)]
    with ThreadPoolExecutor(max_workers=min(threads, trials)) as pool:
        return list(pool.map(fn, range(trials)))
