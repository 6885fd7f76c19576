import numpy as np
import pytest

from storage_poa.demand import (
    MAX_GP_NODES,
    DemandPath,
    GPDemandModel,
    ScenarioTree,
    StepDemand,
    TimeGrid,
    average_demand,
    build_tree,
    example2_path,
    sample_gp_path,
    sample_gp_paths,
    step_from_params,
    tree_from_path,
)
from storage_poa.feasible import FeasibleSet
from storage_poa.prices import Linear
from storage_poa.solvers import solve_cb_linear, solve_dcb_linear


def test_step_from_params_examples():
    D = step_from_params(0.5, 1.0)
    assert (D.d1, D.d2, D.t1) == (1.0, 0.0, 0.5)
    D = step_from_params(0.5, 0.5)
    assert D.d2 == pytest.approx(0.25)
    assert D.t1 == pytest.approx(1 / 3)
    assert D.t1 * D.d1 + (1 - D.t1) * D.d2 == pytest.approx(0.5)


def test_step_mean_is_exact():
    rng = np.random.default_rng(3)
    for x, eps in zip(rng.uniform(1e-6, 1 - 1e-6, 1000), rng.uniform(1e-6, 1.0, 1000)):
        assert average_demand(step_from_params(x, eps)) == pytest.approx(x, rel=1e-14, abs=1e-15)


@pytest.mark.parametrize("x,eps", [(0.0, 0.5), (1.0, 0.5), (0.5, 0.0), (0.5, 1.5)])
def test_step_from_params_ranges(x, eps):
    with pytest.raises(ValueError):
        step_from_params(x, eps)


def test_average_demand_examples():
    grid = TimeGrid(10)
    assert average_demand(DemandPath(grid, np.full(10, 0.7))) == pytest.approx(0.7)
    assert average_demand(StepDemand(1.0, 0.0, 0.2)) == pytest.approx(0.2)
    assert average_demand(example2_path(TimeGrid(2000))) == pytest.approx(1.0, abs=1e-6)


def test_example2_path():
    D = example2_path(TimeGrid(2000))
    assert D.values[500] == pytest.approx(2.0)
    assert D.values.min() == pytest.approx(0.0, abs=1e-15)
    assert D.times[np.argmin(D.values)] == pytest.approx(0.75)
    assert D.hi == 2.0


def test_grid_path_validation():
    with pytest.raises(ValueError):
        TimeGrid(1)
    with pytest.raises(ValueError):
        DemandPath(TimeGrid(4), np.zeros(3))


def test_gp_determinism_and_range():
    model = GPDemandModel()
    grid = TimeGrid(200)
    a = sample_gp_path(model, grid, seed=11)
    b = sample_gp_path(model, grid, seed=11)
    c = sample_gp_path(model, grid, seed=12)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)
    for p in sample_gp_paths(model, grid, 50, seed=5):
        assert p.values.min() >= 0.0 and p.values.max() <= 1.0
        lo, hi = model.envelope(grid.times)
        assert np.all(p.values >= lo - 1e-15) and np.all(p.values <= hi + 1e-15)


def test_gp_sample_mean_within_clt_band():
    model = GPDemandModel()
    grid = TimeGrid(40)
    paths = np.array([p.values for p in sample_gp_paths(model, grid, 1000, seed=2)])
    t = grid.times
    band = 4 * model.sigma(t) / np.sqrt(1000)
    assert np.all(np.abs(paths.mean(axis=0) - model.mean(t)) <= band)


def test_gp_autocorrelation_grows_with_length_scale():
    grid = TimeGrid(100)
    lags = []
    for ell in (0.02, 0.1, 0.5):
        model = GPDemandModel(length_scale=ell)
        t = grid.times
        Z = np.array([(p.values - model.mean(t)) / model.sigma(t) for p in sample_gp_paths(model, grid, 500, seed=9)])
        lags.append(np.mean(Z[:, 1:] * Z[:, :-1]) / np.mean(Z * Z))
    assert lags[0] < lags[1] < lags[2]


def test_gp_limits():
    with pytest.raises(ValueError):
        sample_gp_path(GPDemandModel(), TimeGrid(MAX_GP_NODES + 1))
    with pytest.raises(ValueError):
        GPDemandModel(base=0.9, amplitude=0.2)
    with pytest.raises(np.linalg.LinAlgError, match="jitter"):
        sample_gp_path(GPDemandModel(length_scale=5.0, jitter=0.0), TimeGrid(400))


def test_tree_single_path():
    tree = build_tree(1, 1, start=0.5)
    assert tree.deterministic and tree.size == 1
    assert tree.values[0] == pytest.approx(0.5)


def test_binary_tree_probabilities():
    tree = build_tree(3, 2, start=0.5, step=0.2, prob_rule="random", seed=4)
    assert len(tree.paths) == 8
    assert tree.leaf_probabilities.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all((tree.values >= 0) & (tree.values <= 1))
    assert all(len(p) == 3 for p in tree.paths)
    # level-1 children of the root move by +/- step
    assert sorted(tree.values[:2]) == pytest.approx([0.3, 0.7])


def test_tree_rules_and_errors():
    tree = build_tree(2, 2, [[0.2, 0.8], [0.1, 0.9]], [0.25, 0.75])
    assert tree.values.tolist() == [0.2, 0.8, 0.1, 0.9, 0.1, 0.9]
    assert tree.probabilities.tolist() == [0.25, 0.75, 0.0625, 0.1875, 0.1875, 0.5625]
    with pytest.raises(ValueError):
        build_tree(14, 2)
    with pytest.raises(ValueError):
        build_tree(2, 2, prob_rule=[0.3, 0.3])
    with pytest.raises(ValueError):
        ScenarioTree(np.array([-1, 0]), np.array([0, 1]), np.array([0.5, 0.5]), np.array([1.0, 0.5]))


def test_tree_embedding_matches_grid_solver():
    rng = np.random.default_rng(8)
    path = DemandPath(TimeGrid(12), rng.uniform(0.1, 0.9, 12))
    tree = tree_from_path(path)
    for S in (FeasibleSet(), FeasibleSet(power=0.2, capacity=0.05, ramp=2.0)):
        for solve in (solve_cb_linear, solve_dcb_linear):
            a = solve(path, S, Linear(1.0))
            b = solve(tree, S, Linear(1.0))
            assert np.allclose(a.policy, b.policy, atol=1e-9)
            assert a.wel == pytest.approx(b.wel, abs=1e-9)
