import math
from fractions import Fraction

import numpy as np
import pytest
from scipy.integrate import simpson

from storage_poa import bernstein
from storage_poa.prices import (
    BernsteinPrice,
    CounterexamplePiecewise,
    DomainError,
    Linear,
    Monomial,
    Polynomial,
    price_from_dict,
    price_to_dict,
    validate,
)

PRICES = [
    Linear(0.5),
    Linear(2.0, 0.3),
    Monomial(4.0, 3),
    Monomial(1.5, 7),
    CounterexamplePiecewise(0.1),
    CounterexamplePiecewise(0.01),
    Polynomial((0.2, 0.5, 1.5, 0.25)),
    BernsteinPrice(bernstein.bernstein_approximant(CounterexamplePiecewise(0.1).price, 200).coeffs),
]


def test_price_examples():
    assert Linear(0.5).price(1.0) == pytest.approx(0.5)
    cx = CounterexamplePiecewise(0.1)
    assert cx.price(0.3) == pytest.approx(2.0)
    assert cx.price(0.75) == pytest.approx(4.0)


def test_cost_examples():
    assert Linear(0.5).cost(1.0) == pytest.approx(0.25)
    assert CounterexamplePiecewise(0.1).cost(1.0) == pytest.approx(2.5 - math.log(0.2), abs=1e-12)
    assert Monomial(4.0, 3).cost(0.5) == pytest.approx(0.0625)


def test_domain_errors():
    with pytest.raises(DomainError):
        Linear(1.0).price(-0.1)
    with pytest.raises(DomainError):
        CounterexamplePiecewise(0.1).price(1.2)
    with pytest.raises(DomainError):
        CounterexamplePiecewise(0.1).cost(np.array([0.2, 1.01]))
    # linear and monomial prices extend above 1
    assert Monomial(1.0, 2).price(1.5) == pytest.approx(2.25)


def test_parameter_validation():
    for bad in (lambda: Linear(0.0), lambda: Linear(1.0, -1.0), lambda: Monomial(1.0, 0),
                lambda: Monomial(-1.0, 2), lambda: CounterexamplePiecewise(0.5)):
        with pytest.raises(ValueError):
            bad()


def _breaks(P):
    if isinstance(P, CounterexamplePiecewise):
        return [0.5, 1.0 - P.delta]
    return []


@pytest.mark.parametrize("P", PRICES, ids=lambda P: P.kind)
def test_cost_matches_simpson_quadrature(P):
    rng = np.random.default_rng(0)
    for z in rng.uniform(0.0, 1.0, 100):
        # integrate piece by piece so kinks sit on panel edges
        edges = [0.0] + [b for b in _breaks(P) if b < z] + [z]
        total = 0.0
        for a, b in zip(edges, edges[1:]):
            t = np.linspace(a, b, 10_001)
            total += simpson(P.price(t), x=t)
        assert P.cost(z) == pytest.approx(total, abs=1e-8)


@pytest.mark.parametrize("delta", [0.1, 0.01, 1e-4])
def test_counterexample_continuity_and_convexity(delta):
    P = CounterexamplePiecewise(delta)
    h = 1e-12
    for b in (0.5, 1.0 - delta):
        # any jump beyond what the steepest slope 1/delta^2 explains over 2h
        jump = abs(P.price(b + h) - P.price(b - h)) - 2 * h / delta**2
        assert jump < 1e-9
    z = np.linspace(0.0, 1.0, 20_001)
    q = np.diff(P.price(z)) / np.diff(z)
    assert np.all(q >= -1e-9)
    assert np.all(np.diff(q) >= -1e-6 * np.max(np.abs(q)))


@pytest.mark.parametrize("P", PRICES, ids=lambda P: P.kind)
def test_cost_midpoint_convexity(P):
    rng = np.random.default_rng(1)
    z1, z2 = rng.uniform(0.0, 1.0, (2, 500))
    assert np.all(P.cost((z1 + z2) / 2) <= (P.cost(z1) + P.cost(z2)) / 2 + 1e-12)


def test_validate_reports():
    assert validate(Linear(1.0)).valid
    rep = validate(Polynomial((1.0, -2.0)))
    assert not rep.valid and not rep.increasing
    assert rep.first_violation[0] in ("decreasing", "negative")
    lift = bernstein.lift_price(CounterexamplePiecewise(0.1), 0.1)
    assert validate(lift.price).valid
    concave = validate(Polynomial((0.0, 2.0, -0.5)))
    assert not concave.convex and concave.first_violation[0] == "nonconvex"


def test_exact_polynomial_beats_float_cancellation():
    poly = bernstein.bernstein_approximant(CounterexamplePiecewise(0.1).price, 128)
    P = Polynomial(bernstein.to_monomial(poly))
    x = np.linspace(0.0, 1.0, 37)
    assert np.allclose(P.price(x), bernstein.bernstein_eval(poly, x), atol=1e-9)


@pytest.mark.parametrize("P", PRICES + [Polynomial((Fraction(1, 3), Fraction(2, 7)))], ids=lambda P: P.kind)
def test_serialization_round_trip(P):
    Q = price_from_dict(price_to_dict(P))
    assert type(Q) is type(P)
    z = np.linspace(0.0, 1.0, 11)
    assert np.array_equal(Q.price(z), P.price(z))
    assert price_to_dict(Q) == price_to_dict(P)


def test_from_dict_rejects_bad_input():
    with pytest.raises(ValueError):
        price_from_dict({"kind": "cubic"})
    with pytest.raises(ValueError):
        price_from_dict({"kind": "monomial", "alpha": 1, "d": 2.5})
    with pytest.raises(KeyError):
        price_from_dict({"kind": "linear"})
    with pytest.raises(ValueError):
        price_from_dict({"kind": "bernstein", "n": 3, "coeffs": [0, 1]})
