"""Increasing price curves P(z) on net demand and their cost integrals G(z).

All variants are immutable and evaluate elementwise on floats or arrays.
Costs are closed forms, never quadrature.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property
from typing import ClassVar, Union

import numpy as np

from . import bernstein

# Net demand computed as D - B can land a few ulps outside [0, 1].
DOMAIN_SLACK = 1e-9
VALIDATION_GRID = 10_000
# Polynomials above this degree are evaluated exactly in integer arithmetic.
_EXACT_DEGREE = 12


class DomainError(ValueError):
    """Raised when a price or cost is requested outside its domain."""


def _domain(z, upper: float | None):
    za = np.asarray(z, dtype=float)
    if np.any(np.isnan(za)) or np.any(za < -DOMAIN_SLACK):
        raise DomainError(f"net demand must be >= 0, got min {np.nanmin(za):.6g}")
    if upper is not None and np.any(za > upper + DOMAIN_SLACK):
        raise DomainError(f"net demand must be <= {upper}, got max {za.max():.6g}")
    return np.clip(za, 0.0, upper)


def _out(z, values):
    return float(values) if np.ndim(z) == 0 else values


@dataclass(frozen=True)
class Linear:
    """P(z) = a z + b."""

    a: float
    b: float = 0.0
    kind: ClassVar[str] = "linear"

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError("linear price needs a > 0")
        if self.b < 0:
            raise ValueError("linear price needs b >= 0")

    def price(self, z):
        za = _domain(z, None)
        return _out(z, self.a * za + self.b)

    def cost(self, z):
        za = _domain(z, None)
        return _out(z, 0.5 * self.a * za * za + self.b * za)


@dataclass(frozen=True)
class Monomial:
    """P(z) = alpha z^d with integer d >= 1."""

    alpha: float
    d: int
    kind: ClassVar[str] = "monomial"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("monomial price needs alpha > 0")
        if int(self.d) != self.d or self.d < 1:
            raise ValueError("monomial degree must be a positive integer")

    def price(self, z):
        za = _domain(z, None)
        return _out(z, self.alpha * za**self.d)

    def cost(self, z):
        za = _domain(z, None)
        return _out(z, self.alpha * za ** (self.d + 1) / (self.d + 1))


@dataclass(frozen=True)
class CounterexamplePiecewise:
    """Convex three-branch price with a steep knee near z = 1.

    ``2`` on [0, 1/2], ``1/(1-z)`` on (1/2, 1-delta], then the tangent line
    at ``1 - delta`` up to z = 1.  Defined on [0, 1] only.
    """

    delta: float
    kind: ClassVar[str] = "counterexample"

    def __post_init__(self):
        if not 0.0 < self.delta < 0.5:
            raise ValueError("counterexample needs 0 < delta < 1/2")

    def price(self, z):
        za = _domain(z, 1.0)
        dl = self.delta
        mid = 1.0 / np.maximum(1.0 - za, dl)
        tail = (za - 1.0 + dl) / dl**2 + 1.0 / dl
        out = np.where(za <= 0.5, 2.0, np.where(za <= 1.0 - dl, mid, tail))
        return _out(z, out)

    def cost(self, z):
        za = _domain(z, 1.0)
        dl = self.delta
        mid = -np.log(np.maximum(1.0 - za, dl)) + math.log(0.5) + 1.0
        u = za - 1.0 + dl
        tail = u * u / (2 * dl**2) + u / dl - math.log(2 * dl) + 1.0
        out = np.where(za <= 0.5, 2.0 * za, np.where(za <= 1.0 - dl, mid, tail))
        return _out(z, out)


@dataclass(frozen=True)
class Polynomial:
    """P(z) = sum_j c_j z^j in the monomial basis.

    Coefficients may be floats or exact ``Fraction`` values.  Exact
    coefficients (and any degree above 12) are evaluated in integer
    arithmetic and rounded once, since high-degree monomial forms cancel
    catastrophically in floating point.
    """

    coeffs: tuple
    kind: ClassVar[str] = "polynomial"

    def __post_init__(self):
        c = tuple(self.coeffs)
        if not c:
            raise ValueError("polynomial needs at least one coefficient")
        object.__setattr__(self, "coeffs", c)

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    @cached_property
    def _exact(self) -> bool:
        return self.degree > _EXACT_DEGREE or any(isinstance(c, Fraction) for c in self.coeffs)

    @cached_property
    def _integer_form(self):
        fr = [Fraction(c) for c in self.coeffs]
        den = math.lcm(*(f.denominator for f in fr))
        return [int(f * den) for f in fr], den

    def _eval(self, za: np.ndarray) -> np.ndarray:
        if not self._exact:
            return np.polynomial.polynomial.polyval(za, np.array(self.coeffs, dtype=float))
        ints, den = self._integer_form
        flat = [_exact_horner(ints, den, float(v)) for v in za.reshape(-1)]
        return np.array(flat, dtype=float).reshape(za.shape)

    @cached_property
    def _antiderivative(self) -> "Polynomial":
        if self._exact:
            c = (Fraction(0),) + tuple(Fraction(v) / (j + 1) for j, v in enumerate(self.coeffs))
        else:
            c = (0.0,) + tuple(float(v) / (j + 1) for j, v in enumerate(self.coeffs))
        return Polynomial(c)

    def price(self, z):
        return _out(z, self._eval(_domain(z, None)))

    def cost(self, z):
        return _out(z, self._antiderivative._eval(_domain(z, None)))


def _exact_horner(ints: list[int], den: int, x: float) -> float:
    # x = m / 2**e exactly; sum_j ints[j] x^j / den, with one final rounding.
    m, q = x.as_integer_ratio()
    e = q.bit_length() - 1
    n = len(ints) - 1
    acc = ints[n]
    for j in range(n - 1, -1, -1):
        acc = acc * m + (ints[j] << (e * (n - j)))
    return float(Fraction(acc, den << (e * n)))


@dataclass(frozen=True, eq=False)
class BernsteinPrice:
    """Convex polynomial kept in Bernstein form (control values f(k/n))."""

    coeffs: np.ndarray
    source: str | None = None
    delta: float | None = None
    kind: ClassVar[str] = "bernstein"

    def __post_init__(self):
        object.__setattr__(self, "coeffs", np.asarray(self.coeffs, dtype=float))

    @property
    def degree(self) -> int:
        return self.coeffs.size - 1

    @cached_property
    def _cost_poly(self):
        return bernstein.antiderivative(self.coeffs)

    def price(self, z):
        return _out(z, np.asarray(bernstein.bernstein_eval(self.coeffs, _domain(z, 1.0))))

    def cost(self, z):
        return _out(z, np.asarray(bernstein.bernstein_eval(self._cost_poly, _domain(z, 1.0))))

    def __eq__(self, other):
        if not isinstance(other, BernsteinPrice):
            return NotImplemented
        return (
            self.source == other.source
            and self.delta == other.delta
            and np.array_equal(self.coeffs, other.coeffs)
        )

    __hash__ = None


PriceFunction = Union[Linear, Monomial, CounterexamplePiecewise, Polynomial, BernsteinPrice]


def price(P: PriceFunction, z):
    return P.price(z)


def cost(P: PriceFunction, z):
    return P.cost(z)


@dataclass(frozen=True)
class ValidityReport:
    valid: bool
    nonnegative: bool
    increasing: bool
    convex: bool
    first_violation: tuple[str, float] | None = None
    grid_points: int = VALIDATION_GRID


def validate(P: PriceFunction, points: int = VALIDATION_GRID) -> ValidityReport:
    """Grid-certify nonnegativity, monotonicity and convexity on [0, 1].

    Differences are compared against a slack of 1e-12 (first) and 1e-10
    (second) times the largest price magnitude, which absorbs evaluation
    rounding but not genuine curvature.
    """
    z = np.linspace(0.0, 1.0, points)
    p = np.asarray(P.price(z), dtype=float)
    scale = max(1.0, float(np.max(np.abs(p))))
    d1 = np.diff(p)
    d2 = np.diff(p, 2)
    neg = np.flatnonzero(p < -1e-12 * scale)
    dec = np.flatnonzero(d1 < -1e-12 * scale)
    conc = np.flatnonzero(d2 < -1e-10 * scale)
    first = None
    for label, idx, offset in (("negative", neg, 0), ("decreasing", dec, 0), ("nonconvex", conc, 1)):
        if idx.size:
            first = (label, float(z[idx[0] + offset]))
            break
    return ValidityReport(
        valid=not (neg.size or dec.size or conc.size),
        nonnegative=not neg.size,
        increasing=not dec.size,
        convex=not conc.size,
        first_violation=first,
        grid_points=points,
    )


def price_to_dict(P: PriceFunction) -> dict:
    if isinstance(P, Linear):
        return {"kind": "linear", "a": P.a, "b": P.b}
    if isinstance(P, Monomial):
        return {"kind": "monomial", "alpha": P.alpha, "d": P.d}
    if isinstance(P, CounterexamplePiecewise):
        return {"kind": "counterexample", "delta": P.delta}
    if isinstance(P, Polynomial):
        coeffs = [
            {"num": c.numerator, "den": c.denominator} if isinstance(c, Fraction) else float(c)
            for c in P.coeffs
        ]
        return {"kind": "polynomial", "coeffs": coeffs}
    if isinstance(P, BernsteinPrice):
        return {
            "kind": "bernstein",
            "n": P.degree,
            "coeffs": P.coeffs.tolist(),
            "source": P.source,
            "delta": P.delta,
        }
    raise TypeError(f"not a price function: {P!r}")


def price_from_dict(spec: dict) -> PriceFunction:
    """Build a price from its config fragment; raises KeyError/ValueError."""
    kind = spec.get("kind")
    if kind == "linear":
        return Linear(float(spec["a"]), float(spec.get("b", 0.0)))
    if kind == "monomial":
        d = spec["d"]
        if isinstance(d, float) and d.is_integer():
            d = int(d)
        if not isinstance(d, int):
            raise ValueError("monomial degree must be an integer")
        return Monomial(float(spec["alpha"]), d)
    if kind == "counterexample":
        return CounterexamplePiecewise(float(spec["delta"]))
    if kind == "polynomial":
        coeffs = []
        for c in spec["coeffs"]:
            coeffs.append(Fraction(int(c["num"]), int(c["den"])) if isinstance(c, dict) else float(c))
        return Polynomial(tuple(coeffs))
    if kind == "bernstein":
        coeffs = np.asarray(spec["coeffs"], dtype=float)
        if "n" in spec and int(spec["n"]) != coeffs.size - 1:
            raise ValueError("bernstein n does not match the number of coefficients")
        delta = spec.get("delta")
        return BernsteinPrice(coeffs, spec.get("source"), None if delta is None else float(delta))
    raise ValueError(f"unknown price kind {kind!r}")
