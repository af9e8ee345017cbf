"""Truncated power series around zero.

Coefficients may be any field-like numbers (floats, ``fractions.Fraction``),
which lets the arithmetic be checked exactly on rational test cases.
"""

from __future__ import annotations

from typing import Iterable, Sequence

from eoc_lowrank.errors import DomainError, ReversionFailure


class PowerSeries:
    """``a0 + a1 z + ... + aK z^K`` truncated at order ``K``.

    Parameters
    ----------
    coeffs : sequence
        Leading coefficients; missing ones up to ``order`` are zero and
        extra ones are dropped.
    order : int, optional
        Truncation order ``K``. Defaults to ``len(coeffs) - 1``.

    Binary operations truncate at the smaller of the two orders.
    """

    __slots__ = ("coeffs", "order")

    def __init__(self, coeffs: Iterable, order: int | None = None):
        coeffs = list(coeffs)
        if order is None:
            order = len(coeffs) - 1
        if order < 0:
            raise DomainError("series order must be >= 0")
        zero = coeffs[0] * 0 if coeffs else 0
        coeffs = coeffs[: order + 1] + [zero] * (order + 1 - len(coeffs))
        self.coeffs = tuple(coeffs)
        self.order = order

    @classmethod
    def constant(cls, value, order: int) -> "PowerSeries":
        return cls([value], order)

    @classmethod
    def identity(cls, order: int, one=1) -> "PowerSeries":
        """The series ``z``."""
        return cls([one * 0, one], order)

    def __getitem__(self, k: int):
        return self.coeffs[k]

    def __len__(self):
        return self.order + 1

    def __iter__(self):
        return iter(self.coeffs)

    def __repr__(self):
        return f"PowerSeries({list(self.coeffs)!r}, order={self.order})"

    def __eq__(self, other):
        if not isinstance(other, PowerSeries):
            return NotImplemented
        return self.order == other.order and self.coeffs == other.coeffs

    def __hash__(self):
        return hash((self.coeffs, self.order))

    def _coerce(self, other) -> "PowerSeries":
        if isinstance(other, PowerSeries):
            return other
        return PowerSeries.constant(other, self.order)

    def __add__(self, other):
        other = self._coerce(other)
        k = min(self.order, other.order)
        return PowerSeries([a + b for a, b in zip(self.coeffs[: k + 1], other.coeffs[: k + 1])], k)

    __radd__ = __add__

    def __neg__(self):
        return PowerSeries([-a for a in self.coeffs], self.order)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        if not isinstance(other, PowerSeries):
            return PowerSeries([a * other for a in self.coeffs], self.order)
        k = min(self.order, other.order)
        a, b = self.coeffs, other.coeffs
        out = []
        for n in range(k + 1):
            acc = a[0] * b[n]
            for i in range(1, n + 1):
                acc = acc + a[i] * b[n - i]
            out.append(acc)
        return PowerSeries(out, k)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, PowerSeries):
            return PowerSeries([a / other for a in self.coeffs], self.order)
        return self * other.reciprocal()

    def __rtruediv__(self, other):
        return self._coerce(other) * self.reciprocal()

    def __pow__(self, n: int):
        if int(n) != n or n < 0:
            raise DomainError("only non-negative integer powers are supported")
        result = PowerSeries.constant(self.coeffs[0] ** 0, self.order)
        base = self
        while n:
            if n & 1:
                result = result * base
            base = base * base
            n >>= 1
        return result

    def reciprocal(self) -> "PowerSeries":
        """Multiplicative inverse ``1 / f``; needs ``a0 != 0``."""
        a = self.coeffs
        if a[0] == 0:
            raise ReversionFailure("series with zero constant term has no reciprocal")
        b = [1 / a[0]]
        for n in range(1, self.order + 1):
            acc = a[1] * b[n - 1]
            for i in range(2, n + 1):
                acc = acc + a[i] * b[n - i]
            b.append(-acc / a[0])
        return PowerSeries(b, self.order)

    def shift_down(self) -> "PowerSeries":
        """``f(z) / z`` for a series with ``a0 == 0``; loses one order."""
        if self.coeffs[0] != 0:
            raise DomainError("f(z)/z needs a zero constant term")
        if self.order == 0:
            raise DomainError("cannot divide an order-0 series by z")
        return PowerSeries(self.coeffs[1:], self.order - 1)

    def compose(self, inner: "PowerSeries") -> "PowerSeries":
        """``f(g(z))`` for ``g`` with zero constant term (Horner scheme)."""
        if inner.coeffs[0] != 0:
            raise DomainError("inner series must have zero constant term")
        k = min(self.order, inner.order)
        inner = PowerSeries(inner.coeffs, k)
        result = PowerSeries.constant(self.coeffs[k], k)
        for a in reversed(self.coeffs[:k]):
            result = result * inner + a
        return result

    def __call__(self, z):
        """Evaluate the truncated polynomial at a point."""
        acc = self.coeffs[-1]
        for a in reversed(self.coeffs[:-1]):
            acc = acc * z + a
        return acc

    def reversion(self) -> "PowerSeries":
        """Compositional inverse ``g`` with ``f(g(z)) = z``.

        Needs ``a0 == 0`` and ``a1 != 0``. Lagrange inversion gives
        ``[z^n] g = (1/n) [w^(n-1)] (w / f(w))^n``.
        """
        a = self.coeffs
        if a[0] != 0:
            raise ReversionFailure("series reversion needs a zero constant term")
        if self.order < 1 or a[1] == 0:
            raise ReversionFailure("series reversion needs a non-zero linear coefficient")
        k = self.order
        # w / f(w) = 1 / (a1 + a2 w + ...), kept to order k - 1
        h = PowerSeries(a[1:], k - 1).reciprocal()
        out = [a[1] * 0]
        power = PowerSeries.constant(a[1] ** 0, k - 1)
        for n in range(1, k + 1):
            power = power * h
            out.append(power.coeffs[n - 1] / n)
        return PowerSeries(out, k)

    def to_float(self) -> "PowerSeries":
        return PowerSeries([float(a) for a in self.coeffs], self.order)

    def as_list(self) -> list:
        return list(self.coeffs)


def from_moments(moments: Sequence) -> PowerSeries:
    """Moment series ``psi(z) = sum_{k>=1} m_k z^k`` from ``[m0, m1, ..., mK]``.

    This is ``M(1/z)`` for the moment generating function
    ``M(z) = z G(z) - 1`` written as a series in ``1/z``.
    """
    moments = list(moments)
    return PowerSeries([moments[0] * 0] + moments[1:], len(moments) - 1)
