"""Result records shared by the analytic and empirical sides."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

QUANTITIES = ("length", "correlation", "gradient_norm", "gradient_ratio", "singular_spectrum")


@dataclass
class TrajectoryRecord:
    """Per-layer sequence of a propagated quantity.

    ``values[i]`` belongs to layer ``layers[i]``; it is a scalar for lengths,
    correlations and gradient norms, and a 1-D array for spectra. ``meta``
    carries seed, width, trial index and whatever else produced the record.
    """

    quantity: str
    layers: np.ndarray
    values: Any
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.quantity not in QUANTITIES:
            raise ValueError(f"unknown quantity {self.quantity!r}")
        self.layers = np.asarray(self.layers, dtype=int)
        if self.layers.ndim != 1:
            raise ValueError("layers must be one-dimensional")
        if self.layers.size > 1 and np.any(np.diff(self.layers) <= 0):
            raise ValueError("layer indices must be strictly increasing")
        if self.quantity != "singular_spectrum":
            self.values = np.asarray(self.values, dtype=float)
            if self.values.shape != self.layers.shape:
                raise ValueError("one value per layer expected")

    def __len__(self):
        return len(self.layers)

    def at(self, layer: int):
        idx = np.searchsorted(self.layers, layer)
        if idx >= len(self.layers) or self.layers[idx] != layer:
            raise KeyError(layer)
        return self.values[idx]


@dataclass(frozen=True)
class SpectrumMoments:
    """First two moments of the eigenvalue distribution of ``J J^T``."""

    m1: float
    m2: float
    source: str
    depth: int

    @property
    def variance(self) -> float:
        return self.m2 - self.m1 * self.m1

    def as_dict(self) -> dict:
        return {"m1": self.m1, "m2": self.m2, "variance": self.variance,
                "source": self.source, "depth": self.depth}
