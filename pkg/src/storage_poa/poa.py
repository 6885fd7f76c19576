"""Price of Anarchy: classification, instance families and parameter sweeps."""
from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bernstein import LiftResult, corollary_bound, lift_price
from .demand import StepDemand, step_from_params
from .feasible import FeasibleSet, Projector
from .prices import CounterexamplePiecewise, Linear, Monomial
from .solvers import (
    STEP_GRID_POINTS,
    TOL_REV,
    SolveResult,
    _batch_wel,
    _step_layout,
    certificate_linear,
    feasible_probes,
    k_star_quadratic,
    solve_cb_averaging,
    solve_cb_linear,
    solve_dcb_linear,
    solve_dcb_step,
    step_search,
    wel,
)

FINITE, UNITY, INFINITE = "Finite", "Unity", "Infinite"
SWEEP_MARGIN = 1e-4
SWEEP_GRID_POINTS = 2001
THREADS_ENV = "POA_STORAGE_THREADS"


@dataclass(frozen=True)
class PoAResult:
    """Three-way outcome: a finite ratio, Unity (nothing to gain) or Infinite.

    ``flag`` is ``"negative"`` or ``"zero"`` for Infinite results, telling a
    harmful decentralised battery from a useless one, and ``"borderline"``
    when a welfare value sits within a factor 10 of ``tol``.
    """

    case: str
    value: float
    wel_cb: float
    wel_dcb_min: float
    near_optimal_count: int = 1
    flag: str | None = None
    tol: float = 0.0

    def __str__(self) -> str:
        if self.case == FINITE:
            return f"{FINITE} {self.value:.6f}"
        if self.case == INFINITE:
            return f"{INFINITE} ({self.flag})"
        return UNITY


def compute_poa(wel_cb: float, wel_dcb_set, tol: float | None = None) -> PoAResult:
    """Classify ``wel_cb / min(wel_dcb_set)``.

    The worst decentralised optimum is used.  ``tol`` defaults to
    ``1e-9 * max(1, |wel_cb|)``; step instances with tiny welfare scales
    should pass a tolerance relative to their own cost scale.
    """
    vals = np.atleast_1d(np.asarray(wel_dcb_set, dtype=float))
    if vals.size == 0:
        raise ValueError("need at least one decentralised welfare value")
    m = float(vals.min())
    if tol is None:
        tol = 1e-9 * max(1.0, abs(wel_cb))
    border = any(tol / 10 < abs(v) < 10 * tol for v in (wel_cb, m))
    if m > tol:
        case, value, flag = FINITE, wel_cb / m, None
    elif abs(wel_cb) <= tol and abs(m) <= tol:
        case, value, flag = UNITY, 1.0, None
    else:
        case, value = INFINITE, math.inf
        flag = "negative" if m <= -tol else "zero"
    if border and flag is None:
        flag = "borderline"
    return PoAResult(case, value, float(wel_cb), m, int(vals.size), flag, float(tol))


@dataclass
class LinearInstance:
    cb: SolveResult
    dcb: SolveResult
    poa: PoAResult


def solve_linear_instance(
    D,
    S: FeasibleSet | None = None,
    P: Linear | None = None,
    certify: bool = False,
    num_probes: int = 256,
    seed: int = 0,
    tol: float | None = None,
    proj_tol: float = 1e-9,
) -> LinearInstance:
    """Both linear solves on one shared projector, optionally certified.

    Certification reuses one set of random feasible probes for both
    solves and adds the exact worst-direction LP check.
    """
    P = P or Linear(1.0)
    proj = Projector(D, S or FeasibleSet())
    cb = solve_cb_linear(D, S, P, proj, proj_tol)
    dcb = solve_dcb_linear(D, S, P, proj, proj_tol)
    if certify:
        probes = feasible_probes(D, S, num_probes, seed, proj)
        cb.certificate_residual = certificate_linear(cb, D, S, which="cb", other=dcb, probes=probes, projector=proj)
        dcb.certificate_residual = certificate_linear(dcb, D, S, which="dcb", other=cb, probes=probes, projector=proj)
    return LinearInstance(cb, dcb, compute_poa(cb.wel, [dcb.wel], tol))


def poa_linear(D, S: FeasibleSet | None = None, a: float = 1.0, b: float = 0.0, tol: float | None = None) -> PoAResult:
    """PoA for a linear price ``a z + b`` on any grid, step or tree demand."""
    return solve_linear_instance(D, S, Linear(a, b), tol=tol).poa


def _cost_scale(D, P) -> float:
    return float(np.dot(D.durations * D.probabilities, P.cost(D.values)))


@dataclass
class StepPoA:
    poa: PoAResult
    cb: SolveResult
    dcb: SolveResult


def step_poa(
    D: StepDemand,
    P,
    tol_rev: float = TOL_REV,
    grid_points: int = STEP_GRID_POINTS,
    tol: float | None = None,
) -> StepPoA:
    """Full smoothing against the revenue-optimal step policy for any price.

    ``tol`` defaults to ``1e-9`` times the no-battery cost ``int G(D)``.
    """
    cb = solve_cb_averaging(D, P)
    dcb = solve_dcb_step(D, P, tol_rev, grid_points)
    if tol is None:
        tol = 1e-9 * _cost_scale(D, P)
    return StepPoA(compute_poa(cb.wel, dcb.near_optimal_wel, tol), cb, dcb)


def poa_step_monomial(x: float, eps: float, d: int, method: str = "auto") -> PoAResult:
    """PoA of the step instance with mean ``x``, depth ``eps`` and price ``(d+1) z^d``.

    ``method="auto"`` uses the closed-form optimum for d = 2 and the grid
    search otherwise; ``"grid"`` always searches.
    """
    if method not in ("auto", "grid"):
        raise ValueError("method must be 'auto' or 'grid'")
    D = step_from_params(x, eps)
    P = Monomial(d + 1, d)
    if d == 2 and method == "auto":
        k = k_star_quadratic(x, eps)
        wel_cb = wel(D.values - D.mean, D, P)
        return compute_poa(wel_cb, [wel(k * (D.values - D.mean), D, P)], 1e-9 * _cost_scale(D, P))
    return step_poa(D, P).poa


def lower_bound_value(d: int) -> float:
    """``1 / (1 - (d/(d+1))^(d+1))``; tends to e/(e-1) as d grows."""
    if int(d) != d or d < 1:
        raise ValueError("d must be a positive integer")
    return -1.0 / math.expm1((d + 1) * math.log1p(-1.0 / (d + 1)))


def worker_count(requested: int | None = None) -> int:
    """Worker processes for sweeps, capped by ``POA_STORAGE_THREADS``."""
    n = requested if requested is not None else (os.cpu_count() or 1)
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {cap!r}") from None
    return max(1, n)


@dataclass
class SweepTable:
    """PoA over an (x, eps) grid for one monomial degree."""

    d: int
    xs: np.ndarray
    epss: np.ndarray
    poa: np.ndarray
    k_star: np.ndarray
    wel_cb: np.ndarray
    wel_dcb: np.ndarray
    cases: np.ndarray
    bound: float
    flagged: list = field(default_factory=list)

    @property
    def sup(self) -> float:
        finite = np.where(self.cases == FINITE, self.poa, -np.inf)
        return float(finite.max())

    @property
    def argmax(self) -> tuple[int, int]:
        finite = np.where(self.cases == FINITE, self.poa, -np.inf)
        i, j = np.unravel_index(int(np.argmax(finite)), finite.shape)
        return int(i), int(j)

    def rows(self):
        for i, x in enumerate(self.xs):
            for j, e in enumerate(self.epss):
                yield (float(x), float(e), self.d, float(self.poa[i, j]), float(self.k_star[i, j]),
                       float(self.wel_cb[i, j]), float(self.wel_dcb[i, j]))

    def summary(self) -> str:
        i, j = self.argmax
        return f"# sup={self.sup!r},x={float(self.xs[i])!r},eps={float(self.epss[j])!r},d={self.d},flagged={len(self.flagged)}"

    def write_csv(self, fh, header: bool = True) -> None:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(SWEEP_COLUMNS)
        for row in self.rows():
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


SWEEP_COLUMNS = ("x", "eps", "d", "poa", "k_star", "wel_cb", "wel_dcb")


def sweep_axis(n: int, margin: float = SWEEP_MARGIN) -> np.ndarray:
    return np.linspace(margin, 1.0 - margin, n)


def _sweep_block(args):
    d, pairs, grid_points = args
    P = Monomial(d + 1, d)
    demands = [step_from_params(x, e) for x, e in pairs]
    vals, durs, dev = _step_layout(demands)
    ones = np.ones((len(demands), 1))
    wel_cb = _batch_wel(ones, vals, durs, dev, P)[:, 0]
    scale = (P.cost(vals) * durs).sum(axis=1)
    if d == 2:
        k = np.array([k_star_quadratic(x, e) for x, e in pairs])
        w = _batch_wel(k[:, None], vals, durs, dev, P)[:, 0]
        wmin = w
    else:
        res = step_search(demands, P, grid_points=grid_points)
        k, wmin = res.k, res.wel_min
    return k, wel_cb, wmin, scale


def sweep_monomial(
    d: int,
    nx: int = 60,
    neps: int = 60,
    margin: float = SWEEP_MARGIN,
    grid_points: int = SWEEP_GRID_POINTS,
    workers: int | None = 1,
) -> SweepTable:
    """PoA of every cell of an ``nx`` by ``neps`` grid over (0, 1)^2.

    Cells above ``min(2, lower_bound_value(d)) + 1e-6`` are listed in
    ``flagged``; for d >= 3 the lower-bound value is only conjectured tight,
    so flagged cells are reported, not treated as errors.
    """
    xs, es = sweep_axis(nx, margin), sweep_axis(neps, margin)
    pairs = [(x, e) for x in xs for e in es]
    nw = worker_count(workers)
    chunk = max(1, math.ceil(len(pairs) / (4 * nw)))
    blocks = [(d, pairs[s : s + chunk], grid_points) for s in range(0, len(pairs), chunk)]
    if nw > 1 and len(blocks) > 1:
        with ProcessPoolExecutor(max_workers=nw) as ex:
            parts = list(ex.map(_sweep_block, blocks))
    else:
        parts = [_sweep_block(b) for b in blocks]
    k, wel_cb, wmin, scale = (np.concatenate(p) for p in zip(*parts))
    poa = np.empty(len(pairs))
    cases = np.empty(len(pairs), dtype=object)
    for i in range(len(pairs)):
        r = compute_poa(wel_cb[i], [wmin[i]], 1e-9 * scale[i])
        poa[i], cases[i] = r.value, r.case
    bound = min(2.0, lower_bound_value(d))
    shape = (nx, neps)
    table = SweepTable(
        d, xs, es, poa.reshape(shape), k.reshape(shape), wel_cb.reshape(shape), wmin.reshape(shape),
        cases.reshape(shape), bound,
    )
    table.flagged = [
        (float(xs[i]), float(es[j]), float(table.poa[i, j]))
        for i, j in zip(*np.nonzero((table.cases == FINITE) & (table.poa > bound + 1e-6)))
    ]
    return table


@dataclass
class BoundCheck:
    """A measured PoA next to the closed-form bound it should respect."""

    poa: PoAResult
    bound: float
    x_star: float
    holds: bool
    x_ok: bool
    dcb: SolveResult | None = None
    lift: LiftResult | None = None

    @property
    def ok(self) -> bool:
        return self.holds and self.x_ok


def theorem5_instance(d: int, eps: float = 1e-3) -> BoundCheck:
    """Peak demand 1 on [0, eps], zero after, price ``(d+1) z^d``.

    The bound is ``(1 - eps^d) * lower_bound_value(d)``; the optimal peak
    discharge ``x* = k* (1 - eps)`` should not exceed ``1/(d+1)``.
    """
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    D = StepDemand(1.0, 0.0, eps)
    sp = step_poa(D, Monomial(d + 1, d))
    bound = (1.0 - eps**d) * lower_bound_value(d)
    x_star = sp.dcb.k * (1.0 - eps)
    return BoundCheck(
        sp.poa, bound, x_star, sp.poa.value >= bound - 1e-6, x_star <= 1.0 / (d + 1) + 1e-6, sp.dcb
    )


def theorem2_bound(delta: float) -> float:
    return (0.5 - math.log(2 * delta)) / (1.5 - 2 * delta)


def theorem2_poa(delta: float) -> BoundCheck:
    """Half-time peak demand under the counterexample price.

    ``x*`` is the peak discharge ``k*/2``; the revenue optimum sits at
    ``delta - delta^2``.
    """
    D = StepDemand(1.0, 0.0, 0.5)
    sp = step_poa(D, CounterexamplePiecewise(delta))
    bound = theorem2_bound(delta)
    x_star = sp.dcb.k / 2.0
    return BoundCheck(
        sp.poa, bound, x_star, sp.poa.value >= bound - 1e-6, abs(x_star - (delta - delta**2)) <= 1e-4, sp.dcb
    )


def corollary1_poa(delta: float, eps_target: float | None = None, grid_points: int = STEP_GRID_POINTS) -> BoundCheck:
    """The counterexample instance re-solved under its convex-polynomial lift."""
    eps_target = delta if eps_target is None else eps_target
    lift = lift_price(CounterexamplePiecewise(delta), eps_target)
    D = StepDemand(1.0, 0.0, 0.5)
    sp = step_poa(D, lift.price, grid_points=grid_points)
    bound = corollary_bound(delta)
    x_star = sp.dcb.k / 2.0
    return BoundCheck(
        sp.poa, bound, x_star, sp.poa.value >= bound - 1e-6, -1e-4 <= x_star <= 2 * delta + 1e-4, sp.dcb, lift
    )
