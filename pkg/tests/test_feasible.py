import itertools

import numpy as np
import pytest

from storage_poa.demand import DemandPath, StepDemand, TimeGrid, build_tree, example2_path, sample_gp_path, GPDemandModel
from storage_poa.feasible import (
    FeasibleSet,
    InfeasibleError,
    Projector,
    RepresentationError,
    ScalarK,
    StepPolicy,
    as_vector,
    check,
    inner,
    project,
)


def _norm(x, D):
    return np.sqrt(inner(x, x, D))


def _instances():
    rng = np.random.default_rng(21)
    out = []
    grid = TimeGrid(24)
    gp = sample_gp_path(GPDemandModel(), grid, seed=1)
    out.append((gp, FeasibleSet()))
    out.append((gp, FeasibleSet(power=0.05, capacity=0.02, ramp=1.0)))
    out.append((DemandPath(TimeGrid(10), rng.uniform(0, 1, 10)), FeasibleSet(capacity=0.03)))
    tree = build_tree(3, 2, prob_rule="random", seed=3)
    out.append((tree, FeasibleSet(power=0.15, ramp=0.5)))
    out.append((tree, FeasibleSet(capacity=0.04)))
    out.append((StepDemand(0.9, 0.3, 0.4), FeasibleSet(power=0.25)))
    return out


INSTANCES = _instances()


def _random_feasible(proj, D, rng, count):
    return [proj.project(rng.normal(0.0, 0.5, D.values.size)).policy for _ in range(count)]


def test_zero_policy_always_feasible():
    for D, S in INSTANCES:
        assert check(np.zeros(D.values.size), D, S).feasible


def test_example2_policies_against_box():
    D = example2_path(TimeGrid(400))
    s = np.sin(2 * np.pi * D.times)
    assert check(s, D, FeasibleSet()).feasible
    assert check(s, D, FeasibleSet(box=(0.0, 1.0))).feasible
    rep = check(s / 2, D, FeasibleSet(box=(0.0, 1.0)))
    assert not rep.feasible
    assert rep.violations["box"] == pytest.approx(0.5)


def test_step_periodicity_violation():
    D = StepDemand(1.0, 0.0, 0.4)
    B = StepPolicy(0.1 / 0.4, 0.0)
    rep = check(B, D, FeasibleSet())
    assert rep.violations["periodicity"] == pytest.approx(0.1)
    assert rep.violations["non_anticipativity"] == 0.0


def test_representation_errors():
    D = DemandPath(TimeGrid(4), np.full(4, 0.5))
    with pytest.raises(RepresentationError):
        as_vector(np.zeros(3), D)
    with pytest.raises(RepresentationError):
        as_vector(StepPolicy(0.1, -0.1), D)
    with pytest.raises(RepresentationError):
        as_vector(ScalarK(0.5), D)


def test_infeasible_box_and_bad_constraints():
    D = DemandPath(TimeGrid(3), np.array([0.2, 0.5, 1.4]))
    with pytest.raises(InfeasibleError):
        Projector(D, FeasibleSet())
    with pytest.raises(ValueError):
        FeasibleSet(power=-1.0)
    with pytest.raises(ValueError):
        FeasibleSet.from_dict({"box": [0, 1], "charge": 1})
    S = FeasibleSet.from_dict({"box": [0, 2], "power": 0.5, "ramp": 1})
    assert FeasibleSet.from_dict(S.to_dict()) == S


@pytest.mark.parametrize("method", ["dykstra", "active-set"])
def test_projection_idempotent_and_constant_demand(method):
    rng = np.random.default_rng(0)
    for D, S in INSTANCES:
        proj = Projector(D, S)
        B = proj.project(rng.normal(0, 0.3, D.values.size), method=method).policy
        again = proj.project(B, method=method).policy
        assert np.allclose(again, B, atol=1e-8)
    D = DemandPath(TimeGrid(8), np.full(8, 0.6))
    assert np.allclose(project(D.values, D, FeasibleSet(), method=method).policy, 0.0, atol=1e-12)


def test_projection_matches_lattice_search():
    rng = np.random.default_rng(5)
    for _ in range(5):
        D = DemandPath(TimeGrid(3), rng.uniform(0, 1, 3))
        y = rng.normal(0, 0.4, 3)
        B = project(y, D, FeasibleSet()).policy
        lb, ub = FeasibleSet().coordinate_bounds(D)
        res = 200
        axes = [np.arange(np.ceil(lb[i] * res), np.floor(ub[i] * res) + 1) / res for i in range(2)]
        pts = np.array(list(itertools.product(*axes)))
        last = -pts.sum(axis=1)
        ok = (last >= lb[2]) & (last <= ub[2])
        cand = np.column_stack([pts, last])[ok]
        dist = ((cand - y) ** 2).sum(axis=1) / 3
        best = cand[np.argmin(dist)]
        assert np.max(np.abs(best - B)) <= 2e-2
        assert inner(y - B, y - B, D) <= dist.min() + 1e-12


@pytest.mark.parametrize("D,S", INSTANCES)
def test_projection_properties(D, S):
    rng = np.random.default_rng(7)
    proj = Projector(D, S)
    n = D.values.size
    for _ in range(100 if n < 20 else 30):
        u, v = rng.normal(0, 0.5, (2, n))
        pu, pv = proj.project(u).policy, proj.project(v).policy
        assert check(pu, D, S, tol=1e-6).feasible
        assert _norm(pu - pv, D) <= _norm(u - v, D) + 1e-8
    point = rng.normal(0, 0.5, n)
    p = proj.project(point).policy
    for B in _random_feasible(proj, D, rng, 100 if n < 20 else 30):
        assert inner(point - p, B - p, D) <= 1e-6


@pytest.mark.parametrize("D,S", INSTANCES)
def test_dykstra_and_active_set_agree(D, S):
    rng = np.random.default_rng(17)
    proj = Projector(D, S)
    for _ in range(5):
        y = rng.normal(0, 0.5, D.values.size)
        a = proj.project(y, method="dykstra")
        b = proj.project(y, method="active-set")
        assert a.converged and b.converged
        assert np.max(np.abs(a.policy - b.policy)) <= 1e-8


def test_tree_periodicity_per_leaf_path():
    tree = build_tree(3, 2, prob_rule="random", seed=12)
    S = FeasibleSet(capacity=0.05)
    B = project(tree.values, tree, S).policy
    for path in tree.paths:
        assert abs(np.dot(tree.durations[path], B[path])) <= 1e-10


def test_power_zero_pins_policy():
    D = example2_path(TimeGrid(50))
    assert np.allclose(project(D.values, D, FeasibleSet(power=0.0)).policy, 0.0)


def test_projection_matches_cvxpy():
    cp = pytest.importorskip("cvxpy")
    rng = np.random.default_rng(2)
    for D, S in INSTANCES:
        y = rng.normal(0, 0.5, D.values.size)
        B = project(y, D, S).policy
        w = D.durations * D.probabilities
        x = cp.Variable(y.size)
        lb, ub = S.coordinate_bounds(D)
        cons = [x >= lb, x <= ub]
        for path in D.paths:
            q = cp.cumsum(cp.multiply(D.durations[path], x[path]))
            cons.append(q[-1] == 0)
            if S.capacity is not None:
                qq = cp.hstack([0, q])
                for i in range(len(path) + 1):
                    cons += [qq[i:] - qq[i] <= S.capacity, qq[i:] - qq[i] >= -S.capacity]
        if S.ramp is not None:
            e = D.edges
            gap = D.edge_gaps
            diff = x[e[:, 1]] - x[e[:, 0]]
            cons += [diff <= S.ramp * gap, diff >= -S.ramp * gap]
        prob = cp.Problem(cp.Minimize(cp.sum(cp.multiply(w, cp.square(x - y)))), cons)
        prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
        assert np.max(np.abs(x.value - B)) <= 1e-7
        assert np.sum(w * (B - y) ** 2) <= prob.value + 1e-12
