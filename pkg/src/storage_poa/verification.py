"""Acceptance checks shared by ``storage-poa verify`` and the test suite.

Each check returns a :class:`CheckResult`; ``run_suite`` runs a named group
and reports one line per check.  Check ids are stable, and suites map to the
instance families exercised.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import bernstein
from .demand import (
    GPDemandModel,
    TimeGrid,
    DemandPath,
    build_tree,
    example2_path,
    sample_gp_path,
    step_from_params,
)
from .feasible import FeasibleSet, Projector, inner
from .poa import (
    FINITE,
    corollary1_poa,
    lower_bound_value,
    solve_linear_instance,
    sweep_monomial,
    theorem2_poa,
    theorem5_instance,
)
from .prices import CounterexamplePiecewise, Linear, Monomial, validate
from .solvers import (
    _batch_wel,
    _step_layout,
    brute_force_policy,
    k_lower_bound,
    k_star_quadratic,
    rev,
    solve_cb_averaging,
    solve_cb_linear,
    solve_dcb_linear,
    step_search,
    wel,
)

FOUR_THIRDS = 4.0 / 3.0
QUADRATIC_SUP = 27.0 / 19.0
DEFAULT_SEED = 42


@dataclass
class CheckResult:
    id: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.id:2d} {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def check_sinusoid(n: int = 2000) -> tuple[bool, str]:
    D = example2_path(TimeGrid(n))
    P = Linear(2.0)
    inst = solve_linear_instance(D, FeasibleSet(), P)
    rev_at_cb = rev(inst.cb.policy, D, P)
    ok = (
        abs(inst.cb.wel - 0.5) <= 1e-3
        and abs(inst.dcb.wel - 0.375) <= 1e-3
        and inst.poa.case == FINITE
        and abs(inst.poa.value - FOUR_THIRDS) <= 5e-3
        and abs(rev_at_cb) <= 1e-3
    )
    return ok, (
        f"WEL_CB={_fmt(inst.cb.wel)} WEL_DCB={_fmt(inst.dcb.wel)} "
        f"PoA={_fmt(inst.poa.value)} REV(CB)={rev_at_cb:.2e}"
    )


def _random_linear_instance(rng: np.random.Generator):
    family = rng.choice(["step", "sinusoid", "gp"])
    n = int(rng.integers(8, 49))
    grid = TimeGrid(n)
    t = grid.times
    if family == "step":
        hi_level, lo_level = np.sort(rng.uniform(0.0, 1.0, 2))[::-1]
        t1 = rng.uniform(0.1, 0.9)
        v = np.where(t < t1, hi_level, lo_level)
    elif family == "sinusoid":
        amp = rng.uniform(0.05, 0.45)
        base = rng.uniform(amp, 1.0 - amp)
        v = base + amp * np.sin(2 * np.pi * (t + rng.uniform()))
    else:
        model = GPDemandModel(length_scale=rng.uniform(0.05, 0.3))
        v = sample_gp_path(model, grid, seed=int(rng.integers(2**31))).values
    D = DemandPath(grid, v)
    limits = {}
    if rng.uniform() < 0.5:
        limits["power"] = rng.uniform(0.0, 0.5)
    if rng.uniform() < 0.5:
        limits["capacity"] = rng.uniform(0.0, 0.2)
    if rng.uniform() < 0.5:
        limits["ramp"] = rng.uniform(0.0, 5.0)
    return family, D, FeasibleSet(**limits), Linear(rng.uniform(0.1, 5.0), rng.uniform(0.0, 2.0))


def check_linear_universality(count: int = 200, probes: int = 16, seed: int = DEFAULT_SEED) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst_poa, lowest_poa, worst_cert = 0.0, math.inf, 0.0
    bad = []
    for i in range(count):
        family, D, S, P = _random_linear_instance(rng)
        inst = solve_linear_instance(D, S, P, certify=True, num_probes=probes, seed=i)
        value = inst.poa.value
        cert = max(inst.cb.certificate_residual, inst.dcb.certificate_residual)
        worst_poa = max(worst_poa, value)
        lowest_poa = min(lowest_poa, value)
        worst_cert = max(worst_cert, cert)
        if not (1.0 - 1e-9 <= value <= FOUR_THIRDS + 1e-3) or cert > 1e-6:
            bad.append((i, family, value, cert))
    detail = f"{count} instances, PoA in [{_fmt(lowest_poa)}, {_fmt(worst_poa)}], max certificate {worst_cert:.1e}"
    if bad:
        detail += f", failures {bad[:3]}"
    return not bad, detail


def check_linear_tightness() -> tuple[bool, str]:
    chk = theorem5_instance(1, 1e-3)
    return chk.poa.value >= FOUR_THIRDS - 5e-3, f"PoA={_fmt(chk.poa.value)}"


def check_quadratic(n: int = 100, samples: int = 1000, seed: int = DEFAULT_SEED) -> tuple[bool, str]:
    table = sweep_monomial(2, n, n)
    sup_ok = table.sup <= QUADRATIC_SUP + 1e-6
    corner = float(table.poa[0, 0])
    corner_ok = abs(corner - QUADRATIC_SUP) <= 1e-3
    rng = np.random.default_rng(seed)
    xs = rng.uniform(1e-3, 1.0 - 1e-3, samples)
    es = rng.uniform(1e-3, 1.0, samples)
    closed = np.array([k_star_quadratic(x, e) for x, e in zip(xs, es)])
    search = step_search([step_from_params(x, e) for x, e in zip(xs, es)], Monomial(3.0, 2))
    k_err = float(np.max(np.abs(closed - search.k)))
    k2 = closed * closed
    identity = float(np.max(np.abs(xs * (3 * k2 - 1) - (1 - es * xs) * (3 * k2 - 4 * closed + 1))))
    ok = sup_ok and corner_ok and k_err <= 1e-6 and identity <= 1e-9
    return ok, (
        f"sup={table.sup!r} corner={_fmt(corner)} max|k*-grid|={k_err:.1e} identity={identity:.1e}"
    )


def check_monomial_sup(degrees=range(1, 9), n: int = 60) -> tuple[bool, str]:
    sups, k_gap = [], math.inf
    for d in degrees:
        table = sweep_monomial(d, n, n)
        sups.append(table.sup)
        kl = np.array([k_lower_bound(x, d) for x in table.xs])
        k_gap = min(k_gap, float(np.min(table.k_star - kl[:, None])))
    ok = max(sups) <= 2.0 + 1e-6 and k_gap >= -1e-6
    return ok, f"sup by d={[round(s, 6) for s in sups]} min(k*-k_lower)={k_gap:.2e}"


def check_lower_bound_family(dmax: int = 10, eps: float = 1e-3) -> tuple[bool, str]:
    bad = []
    for d in range(1, dmax + 1):
        chk = theorem5_instance(d, eps)
        if not chk.ok:
            bad.append((d, chk.poa.value, chk.bound, chk.x_star))
    limit = lower_bound_value(10_000)
    limit_ok = abs(limit - math.e / (math.e - 1.0)) <= 1e-4
    seq = [lower_bound_value(d) for d in range(1, 1001)]
    mono = all(b >= a for a, b in zip(seq, seq[1:]))
    detail = f"d=1..{dmax} ok={not bad}, LB(1e4)={limit:.6f}, nondecreasing={mono}"
    if bad:
        detail += f", failures {bad}"
    return not bad and limit_ok and mono, detail


def check_counterexample_ladder(deltas=(1e-1, 1e-2, 1e-3, 1e-4)) -> tuple[bool, str]:
    checks = [theorem2_poa(dl) for dl in deltas]
    values = [c.poa.value for c in checks]
    each = all(c.ok for c in checks)
    increasing = all(b > a for a, b in zip(values, values[1:]))
    ok = each and increasing and values[-1] > 5.9
    parts = ", ".join(f"{dl:g}:{_fmt(v)}/{_fmt(c.bound)}" for dl, v, c in zip(deltas, values, checks))
    return ok, f"PoA/bound {parts}; x* ok={all(c.x_ok for c in checks)} increasing={increasing}"


def check_polynomial_lift(delta: float = 0.01, eps_target: float = 0.01) -> tuple[bool, str]:
    chk = corollary1_poa(delta, eps_target)
    lift = chk.lift
    valid = validate(lift.price).valid
    P = CounterexamplePiecewise(delta)
    z = bernstein.gap_grid()
    bn = bernstein.bernstein_eval(bernstein.bernstein_approximant(P.price, lift.degree), z)
    b2n = bernstein.bernstein_eval(bernstein.bernstein_approximant(P.price, 2 * lift.degree), z)
    p = P.price(z)
    scale = max(1.0, float(np.max(p)))
    order = float(min(np.min(bn - b2n), np.min(b2n - p))) / scale
    ok = valid and order >= -1e-9 and chk.holds
    return ok, (
        f"degree={lift.degree} gap={lift.gap:.4g} valid={valid} order_slack={order:.1e} "
        f"PoA={_fmt(chk.poa.value)} bound={_fmt(chk.bound)}"
    )


def projected_gradient_dcb(D, S: FeasibleSet, P: Linear, step: float = 0.3, tol: float = 1e-11, max_iter: int = 20_000):
    """Revenue ascent with Dykstra projections (independent of the active-set solver).

    The weighted-metric gradient of the revenue is ``a (D - 2B)``; ``step``
    is in units of ``1/a``.
    """
    proj = Projector(D, S)
    B = np.zeros_like(D.values)
    for _ in range(max_iter):
        nxt = proj.dykstra(B + step * (D.values - 2.0 * B), tol=1e-13).policy
        if np.max(np.abs(nxt - B)) < tol:
            return nxt
        B = nxt
    return B


def check_scenario_tree(seed: int = DEFAULT_SEED) -> tuple[bool, str]:
    tree = build_tree(3, 2, prob_rule="random", seed=seed, start=0.5, step=0.2)
    S = FeasibleSet(capacity=0.05, ramp=0.6)
    P = Linear(1.5, 0.2)
    inst = solve_linear_instance(tree, S, P)
    oracle = projected_gradient_dcb(tree, S, P)
    diff = inst.dcb.policy - oracle
    dist = math.sqrt(inner(diff, diff, tree))
    resid = max(abs(float(np.dot(tree.durations[p], inst.dcb.policy[p]))) for p in tree.paths)
    resid = max(resid, max(abs(float(np.dot(tree.durations[p], inst.cb.policy[p]))) for p in tree.paths))
    ok = inst.poa.value <= FOUR_THIRDS + 1e-6 and dist <= 1e-4 and resid <= 1e-8
    return ok, f"PoA={_fmt(inst.poa.value)} |DCB-PG|={dist:.1e} periodicity={resid:.1e}"


def _random_feasible(D, count: int, rng: np.random.Generator) -> np.ndarray:
    # zero-mean directions scaled into the box: periodic and feasible by construction
    lb, ub = FeasibleSet().coordinate_bounds(D)
    u = rng.normal(size=(count, D.values.size))
    u -= (u @ D.durations)[:, None] / D.durations.sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        lim = np.where(u > 0, ub / u, np.where(u < 0, lb / u, np.inf))
    t = np.min(lim, axis=1) * rng.uniform(0.0, 1.0, count)
    return t[:, None] * u


def check_oracles(instances: int = 20, policies: int = 10_000, seed: int = DEFAULT_SEED) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    lattice_gap = 0.0
    for _ in range(5):
        D = DemandPath(TimeGrid(3), rng.uniform(0.0, 1.0, 3))
        P = Linear(rng.uniform(0.5, 3.0), rng.uniform(0.0, 1.0))
        cb, dcb = solve_cb_linear(D, None, P), solve_dcb_linear(D, None, P)
        bw = brute_force_policy(D, P, objective="wel")
        br = brute_force_policy(D, P, objective="rev")
        lattice_gap = max(lattice_gap, abs(cb.wel - bw.wel), abs(dcb.rev - br.rev))
    margin = math.inf
    for i in range(instances):
        n = int(rng.integers(4, 17))
        D = DemandPath(TimeGrid(n), rng.uniform(0.0, 1.0, n))
        if i % 2:
            P = Linear(rng.uniform(0.5, 3.0), rng.uniform(0.0, 1.0))
        else:
            P = Monomial(rng.uniform(0.5, 3.0), int(rng.integers(2, 6)))
        best = solve_cb_averaging(D, P).wel
        others = wel(_random_feasible(D, policies, rng), D, P)
        margin = min(margin, best - float(np.max(others)))
    ok = lattice_gap <= 2e-2 and margin >= -1e-12
    return ok, f"lattice gap={lattice_gap:.1e}, averaging margin={margin:.2e}"


def phi_values(xs, epss, ks, d: int) -> np.ndarray:
    """``WEL(1) / WEL(k)`` on a (x, eps, k) grid for the price ``(d+1) z^d``."""
    pairs = [(x, e) for x in xs for e in epss]
    demands = [step_from_params(x, e) for x, e in pairs]
    vals, durs, dev = _step_layout(demands)
    P = Monomial(d + 1, d)
    kk = np.broadcast_to(np.asarray(ks, dtype=float), (len(pairs), len(ks)))
    w = _batch_wel(kk, vals, durs, dev, P)
    w1 = _batch_wel(np.ones((len(pairs), 1)), vals, durs, dev, P)
    return (w1 / w).reshape(len(xs), len(epss), len(ks))


def quadratic_poa_expression(k):
    """PoA of a quadratic-price step instance as a function of its optimal k.

    Equals 27/19 at k = 1/3.
    """
    k = np.asarray(k, dtype=float)
    return (8 * k - 9 * k * k - 1) / (k * k * (5 * k * k - 16 * k + 9))


def check_numeric_properties(degrees=(1, 2, 3, 5, 8), n: int = 20) -> tuple[bool, str]:
    xs = np.linspace(0.05, 0.95, n)
    es = np.linspace(0.05, 1.0, n)
    ks = np.linspace(0.05, 1.0, n)
    rtol = 1e-9
    k_ok = e_ok = True
    for d in degrees:
        phi = phi_values(xs, es, ks, d)
        k_ok &= bool(np.all(np.diff(phi, axis=2) <= rtol * phi[:, :, 1:]))
        e_ok &= bool(np.all(np.diff(phi, axis=1) >= -rtol * phi[:, 1:, :]))
    gx = np.linspace(0.01, 0.99, 50)
    ge = np.linspace(0.01, 1.0, 50)
    K = np.array([[k_star_quadratic(x, e) for e in ge] for x in gx])
    ks_ok = bool(np.all(np.diff(K, axis=0) >= -1e-12) and np.all(np.diff(K, axis=1) >= -1e-12))
    kk = np.linspace(1 / 3 + 1e-4, math.sqrt(3) / 3 - 1e-4, 1000)
    expr_ok = bool(np.all(np.diff(quadratic_poa_expression(kk)) < 0))
    ok = k_ok and e_ok and ks_ok and expr_ok
    return ok, f"phi dec in k={k_ok}, inc in eps={e_ok}, k* monotone={ks_ok}, d=2 expression decreasing={expr_ok}"


@dataclass(frozen=True)
class Check:
    id: int
    name: str
    suite: str
    run: Callable[[], tuple[bool, str]]


CHECKS = (
    Check(1, "sinusoid reproduction", "linear", check_sinusoid),
    Check(2, "linear PoA universality", "linear", check_linear_universality),
    Check(3, "linear bound tightness", "linear", check_linear_tightness),
    Check(4, "quadratic sweep and closed form", "monomial", check_quadratic),
    Check(5, "monomial sweeps below 2", "monomial", check_monomial_sup),
    Check(6, "monomial lower-bound family", "monomial", check_lower_bound_family),
    Check(7, "counterexample ladder", "counterexample", check_counterexample_ladder),
    Check(8, "polynomial lift", "bernstein", check_polynomial_lift),
    Check(9, "scenario tree", "stochastic", check_scenario_tree),
    Check(10, "brute-force and averaging oracles", "linear", check_oracles),
    Check(11, "numeric properties", "monomial", check_numeric_properties),
)
SUITES = ("all", "linear", "monomial", "counterexample", "bernstein", "stochastic")


def run_check(check: Check) -> CheckResult:
    start = time.perf_counter()
    try:
        passed, detail = check.run()
    except Exception as exc:  # a crash is a failed check, not an aborted suite
        passed, detail = False, f"error: {type(exc).__name__}: {exc}"
    return CheckResult(check.id, check.name, bool(passed), detail, time.perf_counter() - start)


def select(suite: str = "all") -> list[Check]:
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")
    return [c for c in CHECKS if suite == "all" or c.suite == suite]


def run_suite(suite: str = "all", report: Callable[[str], None] | None = None) -> list[CheckResult]:
    results = []
    for check in select(suite):
        res = run_check(check)
        if report is not None:
            report(res.line())
        results.append(res)
    return results
