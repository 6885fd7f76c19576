"""Command-line driver: ``storage-poa {solve,poa,sweep,sample-demand,verify}``.

Exit codes: 0 success, 1 bad arguments or config, 2 infeasible instance,
3 solver did not converge, 4 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import math
import os
import sys
import tempfile

import numpy as np

from . import config as cfgmod
from .demand import DEFAULT_SEED, GPDemandModel, StepDemand, TimeGrid, sample_gp_paths
from .feasible import InfeasibleError, as_vector
from .poa import (
    SWEEP_COLUMNS,
    SWEEP_GRID_POINTS,
    SWEEP_MARGIN,
    corollary1_poa,
    lower_bound_value,
    solve_linear_instance,
    step_poa,
    sweep_monomial,
    theorem2_poa,
    theorem5_instance,
    worker_count,
)
from .prices import Linear
from .solvers import solve_cb_averaging, solve_cb_linear, solve_dcb_linear, solve_dcb_step
from .verification import SUITES, run_suite

EXIT_OK, EXIT_PARSE, EXIT_INFEASIBLE, EXIT_NONCONVERGED, EXIT_VERIFY = 0, 1, 2, 3, 4


class UsageError(Exception):
    """Bad command line or unsupported instance; maps to exit code 1."""


class NotConverged(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def atomic_write(path: str, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file in the same directory."""
    target = os.path.abspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(target), prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(text: str, out: str | None) -> None:
    if out:
        atomic_write(out, text)
    else:
        sys.stdout.write(text)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _load(path: str):
    cfg = cfgmod.load(path)
    D = cfg.build_demand()
    cfg.constraints.require_zero_feasible(D)
    return cfg, D


def _limited(S) -> bool:
    return S.power is not None or S.capacity is not None or S.ramp is not None


def solve_instance(cfg, D, objectives=("cb", "dcb")) -> dict:
    """Dispatch to the right solver pair for the instance's price and demand."""
    P, S, tol = cfg.price, cfg.constraints, cfg.tolerances
    out = {}
    if isinstance(P, Linear):
        for obj in objectives:
            solve = solve_cb_linear if obj == "cb" else solve_dcb_linear
            out[obj] = solve(D, S, P, tol=tol["projection"])
    else:
        if _limited(S) or not D.deterministic:
            raise UsageError("nonlinear prices are solved only on deterministic demand without power, capacity or ramp limits")
        if "cb" in objectives:
            out["cb"] = solve_cb_averaging(D, P)
        if "dcb" in objectives:
            if not isinstance(D, StepDemand):
                raise UsageError("revenue solve for a nonlinear price needs step demand")
            out["dcb"] = solve_dcb_step(D, P, tol["rev"])
    for obj, res in out.items():
        if not res.converged:
            raise NotConverged(f"{obj} projection did not converge")
    return out


def cmd_solve(args) -> int:
    cfg, D = _load(args.config)
    objectives = ("cb", "dcb") if args.objective == "both" else (args.objective,)
    results = solve_instance(cfg, D, objectives)
    P = cfg.price
    header = ["node", "t", "dt", "prob", "D"]
    cols = [np.arange(D.values.size), D.times, D.durations, D.probabilities, D.values]
    base_cost = np.asarray(P.cost(D.values), dtype=float)
    for obj in objectives:
        B = as_vector(results[obj].policy, D)
        net = D.values - B
        cost = np.asarray(P.cost(net), dtype=float)
        header += [f"B_{obj}", f"net_{obj}", f"cost_{obj}", f"wel_{obj}"]
        cols += [B, net, cost, base_cost - cost]
    rows = [[int(c[i]) if j == 0 else float(c[i]) for j, c in enumerate(cols)] for i in range(D.values.size)]
    _emit(_csv_text(header, rows), args.out)
    for obj in objectives:
        r = results[obj]
        print(f"{obj}: WEL={r.wel!r} REV={r.rev!r}")
    return EXIT_OK


def poa_for(cfg, D):
    P, S, tol = cfg.price, cfg.constraints, cfg.tolerances
    if isinstance(P, Linear):
        inst = solve_linear_instance(D, S, P, tol=tol["poa"], proj_tol=tol["projection"])
        if not (inst.cb.converged and inst.dcb.converged):
            raise NotConverged("projection did not converge")
        return inst.poa
    if not isinstance(D, StepDemand) or _limited(S):
        raise UsageError("PoA for a nonlinear price needs step demand without power, capacity or ramp limits")
    return step_poa(D, P, tol["rev"], tol=tol["poa"]).poa


def poa_uncertainty(res) -> float:
    """First-order spread of a finite ratio when both welfare values move by ``tol``."""
    if res.case != "Finite":
        return 0.0
    return res.value * (res.tol / abs(res.wel_cb) + res.tol / abs(res.wel_dcb_min))


def cmd_poa(args) -> int:
    cfg, D = _load(args.config)
    res = poa_for(cfg, D)
    head = str(res)
    if res.case == "Finite":
        head = f"{head} ± {poa_uncertainty(res):.1e}"
    print(head)
    print(
        f"wel_cb={res.wel_cb!r} wel_dcb_min={res.wel_dcb_min!r} "
        f"near_optimal={res.near_optimal_count} flag={res.flag or '-'} tol={res.tol:.3g}"
    )
    if args.out:
        atomic_write(
            args.out,
            _csv_text(
                ["case", "value", "wel_cb", "wel_dcb_min", "near_optimal_count", "flag", "tol"],
                [[res.case, res.value, res.wel_cb, res.wel_dcb_min, res.near_optimal_count, res.flag or "", res.tol]],
            ),
        )
    return EXIT_OK


def parse_list(text: str, kind=float) -> list:
    """Comma list (``1,2,5``) or, for floats, a decade range ``1e-1..1e-4``."""
    text = text.strip()
    if ".." in text:
        a, b = (float(p) for p in text.split("..", 1))
        if a <= 0 or b <= 0:
            raise UsageError(f"decade range needs positive ends: {text!r}")
        la, lb = math.log10(a), math.log10(b)
        if abs(la - round(la)) > 1e-9 or abs(lb - round(lb)) > 1e-9:
            raise UsageError(f"decade range ends must be powers of ten: {text!r}")
        step = 1 if lb >= la else -1
        return [kind(10.0**e) for e in range(round(la), round(lb) + step, step)]
    try:
        return [kind(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise UsageError(f"cannot parse list {text!r}") from None


def cmd_sweep(args) -> int:
    workers = worker_count(args.workers)
    lines = []
    if args.family == "monomial":
        degrees = parse_list(args.d, int) if args.d else [2]
        if any(d < 1 for d in degrees):
            raise UsageError("degrees must be positive")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for d in degrees:
            table = sweep_monomial(d, args.nx, args.neps, args.margin, args.grid_points, workers)
            table.write_csv(buf, header=False)
            lines.append(table.summary())
        text = buf.getvalue()
    elif args.family == "theorem5":
        rows = []
        for d in range(1, args.dmax + 1):
            chk = theorem5_instance(d, args.eps)
            rows.append([d, args.eps, chk.poa.value, chk.bound, lower_bound_value(d), chk.x_star, 1.0 / (d + 1), int(chk.ok)])
        text = _csv_text(["d", "eps", "poa", "bound", "lower_bound_value", "x_star", "x_star_limit", "ok"], rows)
        lines.append(f"# dmax={args.dmax},eps={args.eps!r},all_ok={all(r[-1] for r in rows)}")
    else:
        deltas = parse_list(args.deltas or "1e-1..1e-4")
        if any(not 0 < dl < 0.5 for dl in deltas):
            raise UsageError("deltas must lie in (0, 1/2)")
        header = ["delta", "poa", "bound", "x_star", "x_star_expected", "ok"]
        if args.lift:
            header += ["lift_degree", "lift_poa", "lift_bound"]
        rows = []
        for dl in deltas:
            chk = theorem2_poa(dl)
            row = [dl, chk.poa.value, chk.bound, chk.x_star, dl - dl * dl, int(chk.ok)]
            if args.lift:
                lc = corollary1_poa(dl)
                row += [lc.lift.degree, lc.poa.value, lc.bound]
            rows.append(row)
        vals = [r[1] for r in rows]
        inc = all(b > a for a, b in zip(vals, vals[1:]))
        text = _csv_text(header, rows)
        lines.append(f"# deltas={len(deltas)},increasing={inc},all_ok={all(r[5] for r in rows)}")
    _emit(text, args.out)
    for line in lines:
        print(line)
    return EXIT_OK


def cmd_sample_demand(args) -> int:
    if args.paths < 1:
        raise UsageError("--paths must be at least 1")
    try:
        model = GPDemandModel(args.base, args.amplitude, args.length_scale, args.sigma_max, args.jitter, args.seed)
        grid = TimeGrid(args.n)
        paths = sample_gp_paths(model, grid, args.paths, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    t = grid.times
    lo, hi = model.envelope(t)
    header = ["t", "mean", "lower", "upper"] + [f"path_{j + 1}" for j in range(args.paths)]
    cols = [t, model.mean(t), lo, hi] + [p.values for p in paths]
    _emit(_csv_text(header, zip(*cols)), args.out)
    print(f"# paths={args.paths},n={args.n},seed={args.seed},clipped={sum(p.clipped for p in paths)}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_suite(args.suite, report=lambda line: print(line, flush=True))
    failed = [r for r in results if not r.passed]
    print(f"# {len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="storage-poa", description="Battery dispatch and Price of Anarchy calculations.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("solve", help="solve an instance and write the policy table")
    s.add_argument("config")
    s.add_argument("--objective", choices=("cb", "dcb", "both"), default="both")
    s.add_argument("--out", help="CSV path (default: stdout)")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("poa", help="print the PoA case and value of an instance")
    s.add_argument("config")
    s.add_argument("--out", help="optional one-row CSV report")
    s.set_defaults(func=cmd_poa)

    s = sub.add_parser("sweep", help="PoA tables for an instance family")
    s.add_argument("--family", choices=("monomial", "counterexample", "theorem5"), required=True)
    s.add_argument("--d", help="monomial degrees, e.g. 2 or 1,2,3")
    s.add_argument("--nx", type=int, default=60)
    s.add_argument("--neps", type=int, default=60)
    s.add_argument("--margin", type=float, default=SWEEP_MARGIN)
    s.add_argument("--grid-points", type=int, default=SWEEP_GRID_POINTS)
    s.add_argument("--dmax", type=int, default=10)
    s.add_argument("--eps", type=float, default=1e-3)
    s.add_argument("--deltas", help="comma list or decade range such as 1e-1..1e-4")
    s.add_argument("--lift", action="store_true", help="also solve the polynomial lift (slow)")
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--out", help="CSV path (default: stdout)")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("sample-demand", help="GP demand paths with mean and envelope")
    s.add_argument("--paths", type=int, default=2)
    s.add_argument("--seed", type=int, default=DEFAULT_SEED)
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--base", type=float, default=0.7)
    s.add_argument("--amplitude", type=float, default=0.2)
    s.add_argument("--length-scale", type=float, default=0.1)
    s.add_argument("--sigma-max", type=float, default=0.08)
    s.add_argument("--jitter", type=float, default=1e-8)
    s.add_argument("--out", help="CSV path (default: stdout)")
    s.set_defaults(func=cmd_sample_demand)

    s = sub.add_parser("verify", help="run acceptance checks")
    s.add_argument("--suite", choices=SUITES, default="all")
    s.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NotConverged as exc:
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
