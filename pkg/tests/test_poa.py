import io
import math

import numpy as np
import pytest

from storage_poa.demand import DemandPath, TimeGrid, build_tree, example2_path, sample_gp_path, GPDemandModel
from storage_poa.feasible import FeasibleSet
from storage_poa.poa import (
    FINITE,
    INFINITE,
    SWEEP_COLUMNS,
    UNITY,
    compute_poa,
    corollary1_poa,
    lower_bound_value,
    poa_linear,
    poa_step_monomial,
    sweep_monomial,
    theorem2_bound,
    theorem2_poa,
    theorem5_instance,
    worker_count,
)
from storage_poa.solvers import k_star_quadratic
from storage_poa.verification import quadratic_poa_expression


def test_compute_poa_cases():
    r = compute_poa(0.5, [0.375])
    assert r.case == FINITE and r.value == pytest.approx(4 / 3)
    assert str(r) == "Finite 1.333333"
    assert compute_poa(0.0, [0.0]).case == UNITY
    neg = compute_poa(0.3, [-0.01])
    assert neg.case == INFINITE and neg.flag == "negative" and math.isinf(neg.value)
    zero = compute_poa(0.3, [0.0, 0.2])
    assert zero.case == INFINITE and zero.flag == "zero" and zero.near_optimal_count == 2
    assert compute_poa(0.5, [0.4, 0.25]).value == pytest.approx(2.0)
    assert compute_poa(1e-3, [5e-9], tol=1e-9).flag == "borderline"
    with pytest.raises(ValueError):
        compute_poa(1.0, [])


def test_poa_linear_examples():
    r = poa_linear(example2_path(TimeGrid(2000)), FeasibleSet(), a=2.0)
    assert r.value == pytest.approx(4 / 3, abs=5e-3)
    assert poa_linear(DemandPath(TimeGrid(5), np.full(5, 0.4))).case == UNITY
    rng = np.random.default_rng(3)
    for _ in range(10):
        D = sample_gp_path(GPDemandModel(), TimeGrid(24), seed=int(rng.integers(1000)))
        S = FeasibleSet(power=rng.uniform(0.01, 0.2), capacity=rng.uniform(0.005, 0.1))
        r = poa_linear(D, S, a=rng.uniform(0.2, 3), b=rng.uniform(0, 1))
        assert 1 - 1e-9 <= r.value <= 4 / 3 + 1e-3


@pytest.mark.parametrize("depth", [2, 3, 4])
def test_tree_linear_poa_bounded(depth):
    rng = np.random.default_rng(depth)
    for _ in range(3):
        tree = build_tree(depth, 2, prob_rule="random", seed=int(rng.integers(1000)), step=rng.uniform(0.05, 0.25))
        S = FeasibleSet(capacity=rng.uniform(0.01, 0.1), ramp=rng.uniform(0.2, 2))
        assert poa_linear(tree, S).value <= 4 / 3 + 1e-3


def test_quadratic_corner_and_linear_step():
    assert poa_step_monomial(1e-4, 1e-4, 2).value == pytest.approx(27 / 19, abs=1e-3)
    rng = np.random.default_rng(0)
    for x, e in rng.uniform(0.01, 0.99, (10, 2)):
        assert poa_step_monomial(x, e, 1).value <= 4 / 3 + 1e-6
    with pytest.raises(ValueError):
        poa_step_monomial(0.5, 0.5, 2, method="exact")


def test_quadratic_ratio_expression_matches_pipeline():
    rng = np.random.default_rng(5)
    for x, e in rng.uniform(0.01, 0.99, (20, 2)):
        expr = float(quadratic_poa_expression(k_star_quadratic(x, e)))
        assert poa_step_monomial(x, e, 2).value == pytest.approx(expr, rel=1e-8)
        # the grid pipeline sees a near-optimal set around k*, so only ~1e-5 agreement
        assert poa_step_monomial(x, e, 2, method="grid").value == pytest.approx(expr, rel=1e-4)


def test_lower_bound_values():
    assert lower_bound_value(1) == pytest.approx(4 / 3, rel=1e-15)
    assert lower_bound_value(2) == pytest.approx(27 / 19, rel=1e-15)
    assert lower_bound_value(10_000) == pytest.approx(math.e / (math.e - 1), abs=1e-4)
    with pytest.raises(ValueError):
        lower_bound_value(0)


def test_lower_bound_family_instances():
    chk = theorem5_instance(1, 1e-3)
    assert chk.poa.value >= 4 / 3 - 5e-3 and chk.ok
    chk = theorem5_instance(3, 1e-3)
    assert chk.bound == pytest.approx((1 - 1e-9) / (1 - 0.75**4))
    assert chk.poa.value >= 1.4628 and chk.ok
    weak = theorem5_instance(1, 0.5)
    assert weak.holds and weak.bound == pytest.approx(0.5 * 4 / 3)


def test_counterexample_ladder():
    assert theorem2_bound(1e-2) == pytest.approx((0.5 - math.log(0.02)) / 1.48)
    assert theorem2_bound(1e-2) == pytest.approx(2.981, abs=1e-3)
    chk = theorem2_poa(1e-2)
    assert chk.ok and chk.x_star == pytest.approx(1e-2 - 1e-4, abs=1e-4)
    assert theorem2_poa(1e-4).poa.value > 5.9
    values = [theorem2_poa(0.1 / 2**j).poa.value for j in range(10)]
    assert all(b > a for a, b in zip(values, values[1:]))


def test_polynomial_lift_at_coarse_delta():
    chk = corollary1_poa(0.1)
    assert chk.bound == pytest.approx(0.958, abs=1e-3)
    assert chk.poa.value > 1 and chk.ok
    assert 0 <= chk.x_star <= 0.2 + 1e-4
    # the lifted price sits above the original by at most eps_target
    assert chk.poa.value >= theorem2_poa(0.1).poa.value - 2 * 0.1 * 10


def test_sweep_table_shape_and_corner():
    t = sweep_monomial(2, 12, 10)
    assert t.poa.shape == (12, 10)
    assert t.argmax == (0, 0)
    assert t.sup <= 27 / 19 + 1e-6
    assert t.summary().startswith("# sup=") and "d=2" in t.summary()
    buf = io.StringIO()
    t.write_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == ",".join(SWEEP_COLUMNS)
    assert len(lines) == 121


def test_sweep_parallel_matches_serial():
    a = sweep_monomial(3, 8, 8, workers=1)
    b = sweep_monomial(3, 8, 8, workers=2)
    assert np.array_equal(a.poa, b.poa)


def test_sweep_sup_trend_reported():
    sups = [sweep_monomial(d, 15, 15).sup for d in range(1, 5)]
    assert all(s <= 2 + 1e-6 for s in sups)
    assert all(b >= a - 1e-9 for a, b in zip(sups, sups[1:]))


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("POA_STORAGE_THREADS", "3")
    assert worker_count(8) == 3
    assert worker_count(2) == 2
    monkeypatch.setenv("POA_STORAGE_THREADS", "many")
    with pytest.raises(ValueError):
        worker_count(4)
