"""Bernstein operator and the convex-polynomial lift of the counterexample price.

Evaluation never touches monomial coefficients.  Small degrees use the
de Casteljau recurrence; large degrees sum the binomial weights
``C(n,k) x^k (1-x)^(n-k)`` over a window of ten standard deviations around
the mode, building them by the ratio recurrence outward from the mode and
normalising at the end (compiled with numba).  Both routes form a convex
combination of the control values, so the result is bounded by them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np
from numba import njit

DE_CASTELJAU_MAX = 64
MONOMIAL_MAX = 256
MAX_LIFT_DEGREE = 2**22
GAP_GRID_POINTS = 10_000

# Half-width of the summation window in binomial standard deviations.
_WINDOW_SIGMAS = 10.0


@dataclass(frozen=True, eq=False)
class BernsteinPoly:
    """Degree-``n`` polynomial stored by its control values ``f(k/n)``."""

    coeffs: np.ndarray
    source: str | None = None

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.ndim != 1 or c.size < 1:
            raise ValueError("coeffs must be a non-empty 1-D array")
        object.__setattr__(self, "coeffs", c)

    @property
    def degree(self) -> int:
        return self.coeffs.size - 1

    def __call__(self, x):
        return bernstein_eval(self, x)


def bernstein_approximant(f: Callable, n: int, source: str | None = None) -> BernsteinPoly:
    """Return ``B_n f`` with control values ``f(k/n)``, k = 0..n."""
    if n < 1:
        raise ValueError("degree must be at least 1")
    k = np.arange(n + 1) / n
    return BernsteinPoly(np.asarray(f(k), dtype=float), source)


def bernstein_eval(poly, x):
    """Evaluate a Bernstein polynomial at ``x`` in [0, 1].

    ``poly`` is a :class:`BernsteinPoly` or a raw array of control values.
    Scalars in give a float back.
    """
    c = poly.coeffs if isinstance(poly, BernsteinPoly) else np.asarray(poly, dtype=float)
    xa = np.asarray(x, dtype=float)
    if np.any(xa < 0.0) or np.any(xa > 1.0) or np.any(np.isnan(xa)):
        raise ValueError("Bernstein evaluation requires 0 <= x <= 1")
    flat = xa.reshape(-1)
    if c.size - 1 <= DE_CASTELJAU_MAX:
        out = de_casteljau(c, flat)
    else:
        out = _windowed_eval(np.ascontiguousarray(c), np.ascontiguousarray(flat))
    return float(out[0]) if xa.ndim == 0 else out.reshape(xa.shape)


def de_casteljau(coeffs, x) -> np.ndarray:
    """de Casteljau recurrence, vectorised over ``x``.  Cost O(n^2) per point."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    b = np.broadcast_to(np.asarray(coeffs, dtype=float), (x.size, len(coeffs))).copy()
    s = 1.0 - x[:, None]
    t = x[:, None]
    for r in range(len(coeffs) - 1, 0, -1):
        b[:, :r] = s * b[:, :r] + t * b[:, 1 : r + 1]
    return b[:, 0]


@njit(cache=True)
def _windowed_eval(c, x):
    n = c.size - 1
    out = np.empty(x.size)
    for i in range(x.size):
        xi = x[i]
        if xi <= 0.0:
            out[i] = c[0]
            continue
        if xi >= 1.0:
            out[i] = c[n]
            continue
        mode = min(int((n + 1) * xi), n)
        h = int(min(n, math.ceil(_WINDOW_SIGMAS * math.sqrt(n * xi * (1.0 - xi)) + 10.0)))
        odds = xi / (1.0 - xi)
        # weights relative to the mode: w_k / w_{k-1} = (n-k+1)/k * x/(1-x)
        acc = c[mode]
        total = 1.0
        w = 1.0
        for k in range(mode + 1, min(n, mode + h) + 1):
            w *= (n - k + 1) / k * odds
            acc += w * c[k]
            total += w
        w = 1.0
        for k in range(mode - 1, max(0, mode - h) - 1, -1):
            w *= (k + 1) / (n - k) / odds
            acc += w * c[k]
            total += w
        out[i] = acc / total
    return out


def antiderivative(poly) -> BernsteinPoly:
    """Control values of ``z -> integral_0^z B(x) dx`` (degree n+1)."""
    c = poly.coeffs if isinstance(poly, BernsteinPoly) else np.asarray(poly, dtype=float)
    n = c.size - 1
    cum = np.concatenate(([0.0], np.cumsum(c))) / (n + 1)
    return BernsteinPoly(cum, getattr(poly, "source", None))


def to_monomial(poly) -> tuple[Fraction, ...]:
    """Exact monomial-basis coefficients c_0..c_n (only for n <= MONOMIAL_MAX).

    Coefficients come back as exact rationals; evaluating them in floating
    point is hopeless beyond modest degrees, so ``prices.Polynomial`` keeps
    them exact.
    """
    c = poly.coeffs if isinstance(poly, BernsteinPoly) else np.asarray(poly, dtype=float)
    n = c.size - 1
    if n > MONOMIAL_MAX:
        raise ValueError(f"monomial conversion limited to degree {MONOMIAL_MAX}, got {n}")
    f = [Fraction(float(v)) for v in c]
    out = []
    for j in range(n + 1):
        # forward difference of order j at 0
        diff = sum(((-1) ** (j - k)) * math.comb(j, k) * f[k] for k in range(j + 1))
        out.append(math.comb(n, j) * diff)
    return tuple(out)


def gap_grid(points: int = GAP_GRID_POINTS) -> np.ndarray:
    return np.linspace(0.0, 1.0, points)


def sup_gap(f: Callable, poly, grid: np.ndarray | None = None) -> float:
    """max |B f - f| on the measurement grid."""
    g = gap_grid() if grid is None else grid
    return float(np.max(np.abs(bernstein_eval(poly, g) - np.asarray(f(g), dtype=float))))


@dataclass(frozen=True, eq=False)
class LiftResult:
    price: object
    degree: int
    gap: float
    grid_points: int


def lift_price(P, eps_target: float, start: int = 8, max_degree: int = MAX_LIFT_DEGREE) -> LiftResult:
    """Lift a counterexample price to a convex polynomial within ``eps_target``.

    Doubles the degree from ``start`` until the sup gap on the 10^4-point
    grid is at most ``eps_target``.  Degrees up to ``MONOMIAL_MAX`` come back
    as a monomial-basis ``Polynomial``; larger ones stay in Bernstein form.
    """
    from .prices import BernsteinPrice, CounterexamplePiecewise, Polynomial

    if not isinstance(P, CounterexamplePiecewise):
        raise TypeError("lift_price expects a CounterexamplePiecewise price")
    if not 0.0 < eps_target <= P.delta:
        raise ValueError("need 0 < eps_target <= delta")
    grid = gap_grid()
    target = P.price(grid)
    n = start
    while n <= max_degree:
        poly = bernstein_approximant(P.price, n, source="counterexample")
        gap = float(np.max(np.abs(bernstein_eval(poly, grid) - target)))
        if gap <= eps_target:
            if n <= MONOMIAL_MAX:
                price = Polynomial(to_monomial(poly))
            else:
                price = BernsteinPrice(poly.coeffs, source="counterexample", delta=P.delta)
            return LiftResult(price, n, gap, grid.size)
        n *= 2
    raise RuntimeError(
        f"Bernstein gap did not reach {eps_target} below degree {max_degree}"
    )


def corollary_bound(delta: float) -> float:
    """Closed-form PoA lower bound for the lifted counterexample."""
    if not 0.0 < delta < 0.5:
        raise ValueError("need 0 < delta < 1/2")
    return (0.5 - math.log(2 * delta) - 2 * delta) / (1.5 + math.log(2.0) - 2 * delta)
