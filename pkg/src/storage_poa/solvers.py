"""Welfare- and revenue-maximising battery policies.

``wel`` and ``rev`` evaluate any policy.  For linear prices both programs
are projections (of D for the welfare objective, of D/2 for revenue), so
they are solved exactly on grids and scenario trees.  For nonlinear prices
the revenue problem is solved only on step instances, where it reduces to
a scalar search over the smoothing fraction k.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .demand import StepDemand, average_demand
from .feasible import FeasibleSet, Projector, ScalarK, StepPolicy, as_vector, check, feasible_mask, inner
from .prices import Linear

DEFAULT_PROBES = 256
STEP_GRID_POINTS = 10_001
TOL_REV = 1e-9
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class SolveResult:
    policy: object
    wel: float
    rev: float
    objective: str
    certificate_residual: float | None = None
    near_optimal_set: tuple = ()
    near_optimal_wel: tuple = ()
    converged: bool = True
    k: float | None = None

    @property
    def wel_min(self) -> float:
        """Worst welfare over the near-optimal set (the policy itself if empty)."""
        return min(self.near_optimal_wel) if self.near_optimal_wel else self.wel


def wel(B, D, P) -> float:
    """Expected time-integrated drop in generation cost, E int G(D) - G(D - B).

    ``B`` may carry leading batch axes; the result then has those axes.
    """
    v = as_vector(B, D)
    w = D.durations * D.probabilities
    gain = P.cost(D.values) - P.cost(D.values - v)
    out = np.asarray(gain) @ w
    return float(out) if np.ndim(out) == 0 else out


def rev(B, D, P) -> float:
    """Expected arbitrage revenue E int B P(D - B)."""
    v = as_vector(B, D)
    w = D.durations * D.probabilities
    out = np.asarray(v * P.price(D.values - v)) @ w
    return float(out) if np.ndim(out) == 0 else out


def wel_linear(B, D, a: float) -> float:
    """Closed form ``a/2 (2<D,B> - <B,B>)`` for periodic policies."""
    v = as_vector(B, D)
    return 0.5 * a * (2.0 * inner(D.values, v, D) - inner(v, v, D))


def rev_linear(B, D, a: float) -> float:
    """Closed form ``a (<D,B> - <B,B>)``; the intercept pays zero on periodic B."""
    v = as_vector(B, D)
    return a * (inner(D.values, v, D) - inner(v, v, D))


def _linear_price(P) -> Linear:
    if P is None:
        return Linear(1.0)
    if not isinstance(P, Linear):
        raise TypeError("linear solvers need a Linear price")
    return P


def _projector(D, S, projector):
    return projector if projector is not None else Projector(D, S or FeasibleSet())


def solve_cb_linear(
    D,
    S: FeasibleSet | None = None,
    P: Linear | None = None,
    projector: Projector | None = None,
    tol: float = 1e-9,
) -> SolveResult:
    """Welfare optimum for a linear price: the weighted projection of D."""
    P = _linear_price(P)
    res = _projector(D, S, projector).project(D.values, tol)
    B = res.policy
    return SolveResult(B, wel_linear(B, D, P.a), rev(B, D, P), "wel", converged=res.converged)


def solve_dcb_linear(
    D,
    S: FeasibleSet | None = None,
    P: Linear | None = None,
    projector: Projector | None = None,
    tol: float = 1e-9,
) -> SolveResult:
    """Revenue optimum for a linear price: the weighted projection of D/2.

    The revenue is strictly concave, so the optimum is unique.
    """
    P = _linear_price(P)
    res = _projector(D, S, projector).project(0.5 * D.values, tol)
    B = res.policy
    w = wel_linear(B, D, P.a)
    return SolveResult(B, w, rev(B, D, P), "rev", near_optimal_wel=(w,), converged=res.converged)


def feasible_probes(D, S: FeasibleSet | None, count: int, seed: int = 0, projector: Projector | None = None) -> list[np.ndarray]:
    """Random feasible policies: projections of scaled Gaussian vectors."""
    proj = _projector(D, S, projector)
    rng = np.random.default_rng(seed)
    spread = max(float(np.ptp(D.values)), 0.1)
    out = []
    for _ in range(count):
        y = rng.normal(0.0, spread * rng.uniform(0.1, 2.0), D.values.size)
        out.append(proj.project(y).policy)
    return out


def worst_direction(grad: np.ndarray, D, projector: Projector) -> float:
    """``max <grad, B>`` over the whole feasible set, by linear programming."""
    G, b, _, Eall = projector._halfspaces()
    w = D.durations * D.probabilities
    res = linprog(
        -(w * grad),
        A_ub=-G,
        b_ub=-b,
        A_eq=Eall if Eall.shape[0] else None,
        b_eq=np.zeros(Eall.shape[0]) if Eall.shape[0] else None,
        bounds=(None, None),
        method="highs",
    )
    if res.status != 0:
        raise RuntimeError(f"certificate LP failed: {res.message}")
    return float(-res.fun)


def certificate_linear(
    result: SolveResult,
    D,
    S: FeasibleSet | None = None,
    num_probes: int = DEFAULT_PROBES,
    which: str | None = None,
    other: SolveResult | None = None,
    probes: list | None = None,
    seed: int = 0,
    exact: bool = True,
    projector: Projector | None = None,
) -> float:
    """Largest first-order optimality violation found for a linear solve.

    The objective gradient at the optimum ``B*`` is ``D - B*`` (welfare) or
    ``D - 2 B*`` (revenue); optimality means ``<grad, B - B*> <= 0`` for
    every feasible B.  Probes are the zero policy, the other solver's
    policy and ``num_probes`` random feasible policies (or the supplied
    ``probes``).  With ``exact=True`` the worst feasible direction is also
    found by a linear program, which makes the check complete rather than
    sampled.
    """
    which = which or ("cb" if result.objective == "wel" else "dcb")
    if which not in ("cb", "dcb"):
        raise ValueError("which must be 'cb' or 'dcb'")
    proj = _projector(D, S, projector)
    Bs = np.asarray(result.policy, dtype=float)
    grad = D.values - (Bs if which == "cb" else 2.0 * Bs)
    if probes is None:
        probes = feasible_probes(D, S, num_probes, seed, proj)
    cands = [np.zeros_like(Bs), *probes]
    if other is not None:
        cands.append(np.asarray(other.policy, dtype=float))
    base = inner(grad, Bs, D)
    resid = max(inner(grad, c, D) - base for c in cands)
    if exact:
        resid = max(resid, worst_direction(grad, D, proj) - base)
    return float(resid)


def solve_cb_averaging(D, P, S: FeasibleSet | None = None) -> SolveResult:
    """Welfare optimum without structural limits: flatten net demand to its mean.

    By Jensen's inequality no periodic policy beats a constant net demand
    for a convex cost, provided the box allows it (it always does, since
    the mean lies between the demand extremes).
    """
    if not D.deterministic:
        raise ValueError("averaging solution needs deterministic demand")
    if S is not None and (S.power is not None or S.capacity is not None or S.ramp is not None):
        raise ValueError("averaging solution ignores power, capacity and ramp limits")
    mean = average_demand(D)
    B = D.values - mean
    if S is not None:
        rep = check(B, D, S)
        if not rep.feasible:
            raise ValueError(f"flattened policy violates the box: {rep.violations}")
    policy = StepPolicy(*B) if isinstance(D, StepDemand) else B
    return SolveResult(policy, wel(B, D, P), rev(B, D, P), "wel", k=1.0 if isinstance(D, StepDemand) else None)


def step_revenue(k, D: StepDemand, P) -> np.ndarray:
    """Revenue of ``k (D - mean D)`` for an array of k values."""
    k = np.asarray(k, dtype=float)
    dev = D.values - D.mean
    B = k[..., None] * dev
    return rev(B, D, P)


def golden_section(f, a: float, b: float, tol: float = 1e-12, max_iter: int = 200) -> tuple[float, float]:
    """Maximise a unimodal ``f`` on [a, b]; returns (argmax, max)."""
    k, v = _golden_batch(lambda x: np.array([f(float(x[0]))]), np.array([a]), np.array([b]), tol, max_iter)
    return float(k[0]), float(v[0])


def _golden_batch(f, a, b, tol=1e-12, max_iter=200):
    # golden-section search run in lockstep on many brackets
    a = np.array(a, dtype=float)
    b = np.array(b, dtype=float)
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if np.all(b - a <= tol):
            break
        left = fc >= fd
        a = np.where(left, a, c)
        b = np.where(left, d, b)
        nc = np.where(left, b - _GOLDEN * (b - a), d)
        nd = np.where(left, c, a + _GOLDEN * (b - a))
        fnew = f(np.where(left, nc, nd))
        fc, fd = np.where(left, fnew, fd), np.where(left, fc, fnew)
        c, d = nc, nd
    cands = np.stack([a, c, d, b])
    vals = np.stack([f(a), fc, fd, f(b)])
    j = np.argmax(vals, axis=0)
    idx = np.arange(a.size)
    return cands[j, idx], vals[j, idx]


@dataclass
class StepSearch:
    """Revenue search results for a batch of step instances (one entry per cell)."""

    k: np.ndarray
    rev: np.ndarray
    wel: np.ndarray
    wel_min: np.ndarray
    near_count: np.ndarray


def _step_layout(demands):
    vals = np.array([D.values for D in demands])
    durs = np.array([D.durations for D in demands])
    dev = vals - (vals * durs).sum(axis=1, keepdims=True)
    return vals, durs, dev


def _batch_rev(k, vals, durs, dev, P):
    B = k[..., None] * dev[:, None, :]
    return (B * P.price(vals[:, None, :] - B) * durs[:, None, :]).sum(axis=-1)


def _batch_wel(k, vals, durs, dev, P):
    B = k[..., None] * dev[:, None, :]
    gain = P.cost(vals)[:, None, :] - P.cost(vals[:, None, :] - B)
    return (gain * durs[:, None, :]).sum(axis=-1)


def step_search(
    demands,
    P,
    tol_rev: float = TOL_REV,
    grid_points: int = STEP_GRID_POINTS,
    peaks: int = 3,
    block: int = 128,
) -> StepSearch:
    """Vectorised revenue search over ``k`` for many step instances sharing a price.

    Each cell gets the dense k grid; the ``peaks`` best grid local maxima
    are refined by golden-section search.  ``wel_min`` is the smallest
    welfare over the near-optimal set (grid points and refined maxima
    within ``tol_rev`` relative of the best revenue).
    """
    demands = list(demands)
    ks = np.linspace(0.0, 1.0, grid_points)
    out = {name: np.empty(len(demands)) for name in ("k", "rev", "wel", "wel_min", "near_count")}
    for s in range(0, len(demands), block):
        vals, durs, dev = _step_layout(demands[s : s + block])
        C = vals.shape[0]
        grid = np.broadcast_to(ks, (C, grid_points))
        r = _batch_rev(grid, vals, durs, dev, P)
        # local maxima on the grid, endpoints included
        left = np.concatenate([np.ones((C, 1), bool), r[:, 1:] >= r[:, :-1]], axis=1)
        right = np.concatenate([r[:, :-1] >= r[:, 1:], np.ones((C, 1), bool)], axis=1)
        score = np.where(left & right, r, -np.inf)
        m = min(peaks, grid_points)
        top = np.argpartition(-score, m - 1, axis=1)[:, :m]
        valid = np.isfinite(np.take_along_axis(score, top, axis=1))
        cell = np.repeat(np.arange(C), m)
        lo = ks[np.maximum(top - 1, 0)].ravel()
        hi = ks[np.minimum(top + 1, grid_points - 1)].ravel()

        def f(k):
            return _batch_rev(k[:, None], vals[cell], durs[cell], dev[cell], P)[:, 0]

        kr, vr = _golden_batch(f, lo, hi)
        vr = np.where(valid.ravel(), vr, -np.inf).reshape(C, m)
        kr = kr.reshape(C, m)
        j = np.argmax(vr, axis=1)
        best_k = kr[np.arange(C), j]
        best = vr[np.arange(C), j]
        gbest = r.max(axis=1)
        use_grid = gbest > best
        best_k = np.where(use_grid, ks[np.argmax(r, axis=1)], best_k)
        best = np.maximum(best, gbest)
        thresh = best - tol_rev * np.maximum(np.abs(best), 1e-12)
        near = r >= thresh[:, None]
        ci, ki = np.nonzero(near)
        w_near = _batch_wel(ks[ki][:, None], vals[ci], durs[ci], dev[ci], P)[:, 0]
        wmin = np.full(C, np.inf)
        np.minimum.at(wmin, ci, w_near)
        w_ref = _batch_wel(kr, vals, durs, dev, P)
        near_ref = vr >= thresh[:, None]
        wmin = np.minimum(wmin, np.where(near_ref, w_ref, np.inf).min(axis=1))
        w_best = _batch_wel(best_k[:, None], vals, durs, dev, P)[:, 0]
        sl = slice(s, s + C)
        out["k"][sl] = best_k
        out["rev"][sl] = best
        out["wel"][sl] = w_best
        out["wel_min"][sl] = np.minimum(wmin, w_best)
        out["near_count"][sl] = near.sum(axis=1) + near_ref.sum(axis=1)
    return StepSearch(**out)


def solve_dcb_step(D: StepDemand, P, tol_rev: float = TOL_REV, grid_points: int = STEP_GRID_POINTS) -> SolveResult:
    """Revenue optimum over periodic two-level policies ``k (D - mean D)``.

    A dense grid on k in [0, 1] locates every local maximum; each is then
    refined by golden-section search on its bracketing cells.  The
    near-optimal set holds every grid k (plus refined maxima) within
    ``tol_rev`` relative of the best revenue, with its welfare alongside.
    """
    if not isinstance(D, StepDemand):
        raise TypeError("solve_dcb_step needs a StepDemand")
    ks = np.linspace(0.0, 1.0, grid_points)
    r = step_revenue(ks, D, P)
    n_peaks = int(np.count_nonzero(
        np.r_[True, r[1:] >= r[:-1]] & np.r_[r[:-1] >= r[1:], True]
    ))
    res = step_search([D], P, tol_rev, grid_points, peaks=min(max(n_peaks, 1), 64))
    best_k, best = float(res.k[0]), float(res.rev[0])
    thresh = best - tol_rev * max(abs(best), 1e-12)
    near = set(float(k) for k in ks[r >= thresh])
    if best >= thresh:
        near.add(best_k)
    near_k = tuple(sorted(near))
    wels = wel(np.array(near_k)[:, None] * (D.values - D.mean), D, P)
    policy = ScalarK(best_k).to_step(D)
    return SolveResult(
        policy,
        wel(policy, D, P),
        rev(policy, D, P),
        "rev",
        near_optimal_set=near_k,
        near_optimal_wel=tuple(float(w) for w in np.atleast_1d(wels)),
        k=best_k,
    )


def k_star_quadratic(x: float, eps: float) -> float:
    """Revenue-optimal smoothing fraction for a quadratic price on a step instance.

    Evaluated in the rationalised form ``(1 + x - eps x) / (2 (1 - eps x) + sqrt(S))``
    with ``S = (eps^2 + 3) x^2 - 2 eps x + 1``, which equals the textbook
    root formula but has no 0/0 at ``eps = (1 - x) / x`` (where k* = 1/2).
    """
    if not 0.0 < x < 1.0:
        raise ValueError("x must lie in (0, 1)")
    if not 0.0 < eps <= 1.0:
        raise ValueError("eps must lie in (0, 1]")
    S = (eps * eps + 3.0) * x * x - 2.0 * eps * x + 1.0
    return (1.0 + x - eps * x) / (2.0 * (1.0 - eps * x) + math.sqrt(S))


def k_lower_bound(x: float, d: int) -> float:
    """Lower bound on the revenue-optimal k for a degree-d monomial price.

    ``(2 + d(1-x) - sqrt(d^2 (1-x)^2 + 4x)) / (2 (d+1) (1-x))``, computed in
    the equivalent cancellation-free form ``2 / (2 + d(1-x) + sqrt(...))``.
    """
    if not 0.0 < x < 1.0:
        raise ValueError("x must lie in (0, 1)")
    if d < 1:
        raise ValueError("d must be at least 1")
    u = d * (1.0 - x)
    return 2.0 / (2.0 + u + math.sqrt(u * u + 4.0 * x))


MAX_BRUTE_ENTRIES = 4


def brute_force_policy(D, P, S: FeasibleSet | None = None, lattice_res: int = 200, objective: str = "wel") -> SolveResult:
    """Exhaustive lattice search (test oracle).

    All entries but the last range over a lattice of spacing
    ``1 / lattice_res`` inside their box bounds; the last entry is fixed by
    periodicity and infeasible points are discarded.  Deterministic
    demand with at most four entries only.
    """
    if objective not in ("wel", "rev"):
        raise ValueError("objective must be 'wel' or 'rev'")
    if len(D.paths) != 1 or D.values.size > MAX_BRUTE_ENTRIES:
        raise ValueError(f"brute force needs one path with at most {MAX_BRUTE_ENTRIES} entries")
    S = S or FeasibleSet()
    lb, ub = S.coordinate_bounds(D)
    dt = D.durations
    axes = []
    for i in range(D.values.size - 1):
        lo = math.ceil(lb[i] * lattice_res - 1e-9)
        hi = math.floor(ub[i] * lattice_res + 1e-9)
        axes.append(np.arange(lo, hi + 1) / lattice_res)
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    last = -(mesh @ dt[:-1]) / dt[-1]
    cand = np.column_stack([mesh, last])
    ok = np.ones(len(cand), dtype=bool)
    tol = 1e-12
    ok &= np.all(cand >= lb - tol, axis=1) & np.all(cand <= ub + tol, axis=1)
    if S.capacity is not None or S.ramp is not None:
        ok &= feasible_mask(cand, D, S, tol=1e-9)
    cand = cand[ok]
    if not len(cand):
        raise ValueError("no lattice point is feasible")
    score = wel(cand, D, P) if objective == "wel" else rev(cand, D, P)
    best = cand[int(np.argmax(score))]
    policy = StepPolicy(*best) if isinstance(D, StepDemand) else best
    return SolveResult(policy, wel(best, D, P), rev(best, D, P), objective)
