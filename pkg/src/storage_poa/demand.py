"""Demand models on [0, 1]: grid paths, step demands, GP samples, scenario trees.

Every demand object exposes the same flat layout so the feasibility and
solver code can treat them alike:

``values``
    demand level per decision entry (grid interval, step piece or tree node)
``durations``
    time length of each entry
``probabilities``
    probability of reaching each entry (1 for deterministic demand)
``paths``
    index arrays, one per sample path, in time order
``edges`` / ``edge_gaps``
    consecutive entry pairs and the time elapsed between them (ramp limits)

Functions on the grid are piecewise constant with the left-endpoint value,
so a time integral is ``sum(durations * values)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

DEFAULT_SEED = 42


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of [0, 1] into ``n`` intervals; node times i/n."""

    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise ValueError("time grid needs an integer n >= 2")

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n) / self.n

    @property
    def dt(self) -> float:
        return 1.0 / self.n


@dataclass(frozen=True, eq=False)
class DemandPath:
    """Deterministic demand, one value per grid interval."""

    grid: TimeGrid
    values: np.ndarray
    lo: float = 0.0
    hi: float = 1.0
    clipped: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n,):
            raise ValueError(f"expected {self.grid.n} values, got shape {v.shape}")
        if self.lo > self.hi:
            raise ValueError("normalization needs lo <= hi")
        object.__setattr__(self, "values", v)

    @property
    def durations(self) -> np.ndarray:
        return np.full(self.grid.n, self.grid.dt)

    @property
    def probabilities(self) -> np.ndarray:
        return np.ones(self.grid.n)

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    @property
    def paths(self) -> list[np.ndarray]:
        return [np.arange(self.grid.n)]

    @property
    def edges(self) -> np.ndarray:
        i = np.arange(self.grid.n - 1)
        return np.column_stack([i, i + 1])

    @property
    def edge_gaps(self) -> np.ndarray:
        return np.full(self.grid.n - 1, self.grid.dt)

    @property
    def deterministic(self) -> bool:
        return True


@dataclass(frozen=True)
class StepDemand:
    """Two-level demand: ``d1`` on [0, t1], ``d2`` on (t1, 1]."""

    d1: float
    d2: float
    t1: float
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.t1 < 1.0:
            raise ValueError("step switch time must lie in (0, 1)")
        if self.lo > self.hi:
            raise ValueError("normalization needs lo <= hi")

    @classmethod
    def from_params(cls, x: float, eps: float) -> "StepDemand":
        return step_from_params(x, eps)

    @property
    def values(self) -> np.ndarray:
        return np.array([self.d1, self.d2], dtype=float)

    @property
    def durations(self) -> np.ndarray:
        return np.array([self.t1, 1.0 - self.t1])

    @property
    def probabilities(self) -> np.ndarray:
        return np.ones(2)

    @property
    def times(self) -> np.ndarray:
        return np.array([0.0, self.t1])

    @property
    def paths(self) -> list[np.ndarray]:
        return [np.arange(2)]

    @property
    def edges(self) -> np.ndarray:
        return np.array([[0, 1]])

    @property
    def edge_gaps(self) -> np.ndarray:
        # the switch is instantaneous, so any ramp limit pins B1 = B2
        return np.zeros(1)

    @property
    def deterministic(self) -> bool:
        return True

    @property
    def mean(self) -> float:
        return self.t1 * self.d1 + (1.0 - self.t1) * self.d2

    def to_path(self, grid: TimeGrid) -> DemandPath:
        """Sample on a grid (exact average when ``t1 * n`` is an integer)."""
        v = np.where(grid.times < self.t1 - 1e-12, self.d1, self.d2)
        return DemandPath(grid, v, self.lo, self.hi)


def step_from_params(x: float, eps: float) -> StepDemand:
    """Peak 1, off-peak ``(1-eps) x``, peak length chosen so the mean is ``x``."""
    if not 0.0 < x < 1.0:
        raise ValueError("average demand x must lie in (0, 1)")
    if not 0.0 < eps <= 1.0:
        raise ValueError("depth eps must lie in (0, 1]")
    t1 = x * eps / (1.0 - x * (1.0 - eps))
    return StepDemand(1.0, (1.0 - eps) * x, t1)


def average_demand(D) -> float:
    """Time-weighted (and, for trees, probability-weighted) mean demand."""
    if isinstance(D, StepDemand):
        return D.mean
    w = D.durations * D.probabilities
    return float(np.dot(w, D.values))


def example2_path(grid: TimeGrid) -> DemandPath:
    """``1 + sin(2 pi t)``; it peaks at 2, so the box is widened to [0, 2]."""
    return DemandPath(grid, 1.0 + np.sin(2 * np.pi * grid.times), lo=0.0, hi=2.0)


@dataclass(frozen=True)
class GPDemandModel:
    """Mean ``base + amplitude sin(2 pi t)`` plus a squared-exponential GP.

    The volatility is ``sigma(t) = min(sigma_max, (1-m)/3, m/3)`` so the
    three-sigma band around the mean stays inside [0, 1].
    """

    base: float = 0.7
    amplitude: float = 0.2
    length_scale: float = 0.1
    sigma_max: float = 0.08
    jitter: float = 1e-8
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if self.length_scale <= 0:
            raise ValueError("length scale must be positive")
        if self.sigma_max < 0 or self.jitter < 0:
            raise ValueError("sigma_max and jitter must be nonnegative")
        lo = self.base - abs(self.amplitude)
        hi = self.base + abs(self.amplitude)
        if lo < 0 or hi > 1:
            raise ValueError("mean trend must stay inside [0, 1]")

    def mean(self, t) -> np.ndarray:
        return self.base + self.amplitude * np.sin(2 * np.pi * np.asarray(t, dtype=float))

    def sigma(self, t) -> np.ndarray:
        m = self.mean(t)
        return np.minimum(self.sigma_max, np.minimum((1.0 - m) / 3.0, m / 3.0))

    def envelope(self, t) -> tuple[np.ndarray, np.ndarray]:
        m, s = self.mean(t), self.sigma(t)
        return m - 3.0 * s, m + 3.0 * s

    def covariance(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        diff = t[:, None] - t[None, :]
        K = np.exp(-0.5 * (diff / self.length_scale) ** 2)
        K[np.diag_indices_from(K)] += self.jitter
        return K


MAX_GP_NODES = 4096


def sample_gp_paths(model: GPDemandModel, grid: TimeGrid, count: int, seed: int | None = None) -> list[DemandPath]:
    """Draw ``count`` demand paths sharing one Cholesky factor.

    Draws landing outside the three-sigma envelope (which lies inside
    [0, 1]) are clipped to it; each path records how many values were
    clipped.
    """
    if grid.n > MAX_GP_NODES:
        raise ValueError(f"GP sampling supports at most {MAX_GP_NODES} grid nodes")
    t = grid.times
    try:
        L = np.linalg.cholesky(model.covariance(t))
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"covariance factorization failed (length_scale={model.length_scale}, "
            f"jitter={model.jitter}); increase jitter"
        ) from exc
    rng = np.random.default_rng(model.seed if seed is None else seed)
    Z = L @ rng.standard_normal((grid.n, count))
    m, s = model.mean(t), model.sigma(t)
    lo, hi = model.envelope(t)
    paths = []
    for j in range(count):
        raw = m + s * Z[:, j]
        v = np.clip(raw, lo, hi)
        paths.append(DemandPath(grid, v, 0.0, 1.0, clipped=int(np.count_nonzero(v != raw))))
    return paths


def sample_gp_path(model: GPDemandModel, grid: TimeGrid, seed: int | None = None) -> DemandPath:
    return sample_gp_paths(model, grid, 1, seed)[0]


@dataclass(frozen=True, eq=False)
class ScenarioTree:
    """Finite scenario tree; node 0 is a value-less root at time index 0.

    Nodes 1..N-1 sit at levels 1..depth and each carries one demand interval
    of length 1/depth.  Decision vectors are indexed by non-root node
    (entry ``i`` belongs to node ``i + 1``), which makes every policy
    non-anticipating by construction.
    """

    parent: np.ndarray
    level: np.ndarray
    value: np.ndarray
    cond_prob: np.ndarray
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        for name in ("parent", "level", "value", "cond_prob"):
            object.__setattr__(self, name, np.asarray(getattr(self, name)))
        if self.parent[0] != -1 or self.level[0] != 0:
            raise ValueError("node 0 must be the root")
        if np.any(self.parent[1:] < 0) or np.any(self.parent[1:] >= np.arange(1, self.parent.size)):
            raise ValueError("parents must precede their children")
        if np.any(self.level[1:] != self.level[self.parent[1:]] + 1):
            raise ValueError("child level must be parent level + 1")
        sums = np.zeros(self.parent.size)
        np.add.at(sums, self.parent[1:], self.cond_prob[1:])
        inner = np.unique(self.parent[1:])
        if not np.allclose(sums[inner], 1.0, atol=1e-12):
            raise ValueError("branch probabilities must sum to 1 at every node")
        leaves = self._leaves()
        if np.any(self.level[leaves] != self.depth):
            raise ValueError("all leaves must sit at the final level")
        v = self.value[1:]
        if np.any(v < self.lo - 1e-12) or np.any(v > self.hi + 1e-12):
            raise ValueError("tree demand values must lie inside [lo, hi]")

    def _leaves(self) -> np.ndarray:
        has_child = np.zeros(self.parent.size, dtype=bool)
        has_child[self.parent[1:]] = True
        return np.flatnonzero(~has_child)

    @property
    def depth(self) -> int:
        return int(self.level.max())

    @property
    def size(self) -> int:
        return self.parent.size - 1

    @property
    def node_probability(self) -> np.ndarray:
        p = np.ones(self.parent.size)
        for i in range(1, self.parent.size):
            p[i] = p[self.parent[i]] * self.cond_prob[i]
        return p

    @property
    def values(self) -> np.ndarray:
        return self.value[1:].astype(float)

    @property
    def durations(self) -> np.ndarray:
        return np.full(self.size, 1.0 / self.depth)

    @property
    def probabilities(self) -> np.ndarray:
        return self.node_probability[1:]

    @property
    def times(self) -> np.ndarray:
        return (self.level[1:] - 1) / self.depth

    @property
    def leaf_probabilities(self) -> np.ndarray:
        return self.node_probability[self._leaves()]

    @property
    def paths(self) -> list[np.ndarray]:
        out = []
        for leaf in self._leaves():
            nodes = []
            i = leaf
            while i > 0:
                nodes.append(i - 1)
                i = self.parent[i]
            out.append(np.array(nodes[::-1]))
        return out

    @property
    def edges(self) -> np.ndarray:
        kids = np.flatnonzero(self.parent > 0)
        return np.column_stack([self.parent[kids] - 1, kids - 1]).astype(int)

    @property
    def edge_gaps(self) -> np.ndarray:
        return np.full(len(self.edges), 1.0 / self.depth)

    @property
    def deterministic(self) -> bool:
        return len(self._leaves()) == 1


MAX_TREE_LEAVES = 10_000

ValueRule = Union[str, Callable[[float, int, int], float], Sequence[Sequence[float]]]


def build_tree(
    depth: int,
    branching: int,
    value_rule: ValueRule = "binary-updown",
    prob_rule: str | Sequence[float] = "uniform",
    seed: int | None = DEFAULT_SEED,
    start: float = 0.5,
    step: float = 0.2,
    lo: float = 0.0,
    hi: float = 1.0,
) -> ScenarioTree:
    """Build a full ``branching``-ary tree with ``depth`` demand levels.

    value_rule
        ``"binary-updown"`` moves the parent value by offsets spread evenly
        over ``[+step, -step]`` (clipped to [lo, hi]; the root holds
        ``start``).  A table ``table[level-1][child]`` gives absolute values.
        A callable ``f(parent_value, level, child)`` is also accepted.
    prob_rule
        ``"uniform"``, ``"random"`` (Dirichlet draws from ``seed``) or a fixed
        list of ``branching`` probabilities.
    """
    if depth < 1 or branching < 1:
        raise ValueError("depth and branching must be positive")
    if branching**depth > MAX_TREE_LEAVES:
        raise ValueError(f"tree would have {branching ** depth} leaves (limit {MAX_TREE_LEAVES})")
    rng = np.random.default_rng(seed)
    if isinstance(value_rule, str):
        if value_rule != "binary-updown":
            raise ValueError(f"unknown value rule {value_rule!r}")
        offsets = np.linspace(step, -step, branching) if branching > 1 else np.zeros(1)

        def child_value(pv, level, j):
            return float(np.clip(pv + offsets[j], lo, hi))

    elif callable(value_rule):
        child_value = value_rule
    else:
        table = [list(row) for row in value_rule]
        if len(table) != depth or any(len(row) != branching for row in table):
            raise ValueError("value table must be depth x branching")

        def child_value(pv, level, j):
            return float(table[level - 1][j])

    if isinstance(prob_rule, str):
        if prob_rule not in ("uniform", "random"):
            raise ValueError(f"unknown probability rule {prob_rule!r}")
        fixed = None
    else:
        fixed = np.asarray(prob_rule, dtype=float)
        if fixed.shape != (branching,) or np.any(fixed < 0) or not math.isclose(fixed.sum(), 1.0, abs_tol=1e-12):
            raise ValueError("probability list must have one nonnegative entry per branch, summing to 1")

    parent, level, value, cond = [-1], [0], [float(start)], [1.0]
    frontier = [0]
    for lev in range(1, depth + 1):
        nxt = []
        for node in frontier:
            if fixed is not None:
                probs = fixed
            elif prob_rule == "uniform":
                probs = np.full(branching, 1.0 / branching)
            else:
                probs = rng.dirichlet(np.ones(branching))
            for j in range(branching):
                parent.append(node)
                level.append(lev)
                value.append(child_value(value[node], lev, j))
                cond.append(float(probs[j]))
                nxt.append(len(parent) - 1)
        frontier = nxt
    return ScenarioTree(np.array(parent), np.array(level), np.array(value), np.array(cond), lo, hi)


def tree_from_path(path: DemandPath) -> ScenarioTree:
    """Embed a deterministic path as a one-branch tree."""
    table = [[v] for v in path.values]
    return build_tree(path.grid.n, 1, table, lo=path.lo, hi=path.hi, start=float(path.values[0]))


Demand = Union[DemandPath, StepDemand, ScenarioTree]
