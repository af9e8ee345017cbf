"""Activation functions and their first two derivatives.

Every evaluator is a numpy ufunc-style map: it accepts floats or arrays and
returns the same shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import special

from eoc_lowrank.errors import UnsupportedDerivative

ArrayFn = Callable[[np.ndarray], np.ndarray]

_TWO_OVER_SQRT_PI = 2.0 / np.sqrt(np.pi)


@dataclass(frozen=True)
class ActivationFamily:
    """An activation phi together with phi' and (for C2 members) phi''.

    Attributes
    ----------
    name : str
        One of ``tanh``, ``erf``, ``identity``, ``relu``.
    smoothness : str
        ``"C2"`` or ``"C0"``. Depth-scale formulas require ``"C2"``.
    phi, dphi : callable
        The activation and its first derivative.
    d2phi : callable or None
        Second derivative; ``None`` when the family is not twice
        differentiable.
    """

    name: str
    smoothness: str
    phi: ArrayFn
    dphi: ArrayFn
    d2phi: Optional[ArrayFn] = None

    @property
    def max_order(self) -> int:
        return 2 if self.d2phi is not None else 1

    def derivative(self, order: int) -> ArrayFn:
        """Return the evaluator for ``phi``, ``phi'`` or ``phi''``."""
        if order == 0:
            return self.phi
        if order == 1:
            return self.dphi
        if order == 2:
            if self.d2phi is None:
                raise UnsupportedDerivative(
                    f"activation {self.name!r} ({self.smoothness}) has no second derivative"
                )
            return self.d2phi
        raise UnsupportedDerivative(f"derivative order must be 0, 1 or 2, got {order}")

    def require_c2(self) -> None:
        if self.smoothness != "C2":
            raise UnsupportedDerivative(
                f"activation {self.name!r} is {self.smoothness}; this operation needs phi''"
            )

    def __repr__(self) -> str:
        return f"ActivationFamily({self.name!r})"


def _tanh_d1(x):
    t = np.tanh(x)
    return 1.0 - t * t


def _tanh_d2(x):
    t = np.tanh(x)
    return -2.0 * t * (1.0 - t * t)


def _erf_d1(x):
    return _TWO_OVER_SQRT_PI * np.exp(-np.square(x))


def _erf_d2(x):
    return -2.0 * np.asarray(x) * _TWO_OVER_SQRT_PI * np.exp(-np.square(x))


def _identity(x):
    return np.asarray(x, dtype=float) * 1.0


def _one(x):
    return np.ones_like(np.asarray(x, dtype=float))


def _zero(x):
    return np.zeros_like(np.asarray(x, dtype=float))


def _relu(x):
    return np.maximum(np.asarray(x, dtype=float), 0.0)


def _relu_d1(x):
    # symmetric subgradient at the kink keeps Gauss-Hermite sums exact
    return np.heaviside(np.asarray(x, dtype=float), 0.5)


TANH = ActivationFamily("tanh", "C2", np.tanh, _tanh_d1, _tanh_d2)
ERF = ActivationFamily("erf", "C2", special.erf, _erf_d1, _erf_d2)
IDENTITY = ActivationFamily("identity", "C2", _identity, _one, _zero)
RELU = ActivationFamily("relu", "C0", _relu, _relu_d1, None)

ACTIVATIONS = {a.name: a for a in (TANH, ERF, IDENTITY, RELU)}


def get_activation(name: str | ActivationFamily) -> ActivationFamily:
    """Look an activation up by name; instances pass through unchanged."""
    if isinstance(name, ActivationFamily):
        return name
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(
            f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}"
        ) from None


def evaluate(family: ActivationFamily | str, order: int, x):
    """Evaluate ``phi`` (order 0), ``phi'`` (1) or ``phi''`` (2) at ``x``.

    Raises
    ------
    UnsupportedDerivative
        If ``order == 2`` for a C0 family such as relu.
    """
    fn = get_activation(family).derivative(order)
    out = fn(x)
    if np.ndim(out) == 0:
        return float(out)
    return out
