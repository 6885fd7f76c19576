"""Battery policy constraints and exact projection onto them.

A policy is a vector aligned with the demand layout (see ``demand``).  The
feasible set is an intersection of

* a coordinate box: ``D - hi <= B <= D - lo`` and ``|B| <= power``,
* periodicity hyperplanes, one per sample path: ``sum(dt * B) = 0``,
* ramp slabs on consecutive entries: ``|B_v - B_u| <= ramp * gap``,
* capacity slabs on every path segment: ``|sum(dt * B)| <= capacity``.

Projection is Euclidean in the inner product ``<X, Y> = sum(p * dt * X * Y)``
(expectation of the time integral).  Two exact methods are provided:

* Dykstra's algorithm with the box, the periodicity subspace and each
  slab as separate sets.  Slab corrections are scalar multipliers
  (Hildreth's method), and slabs that are neither violated nor carrying a
  correction are skipped.  A converged run is polished by solving the KKT
  system on the identified active set.
* The Goldfarb-Idnani dual active-set method, which terminates finitely
  and is the default because Dykstra crawls on long chains of coupled
  ramp constraints.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import nnls

from .demand import StepDemand


class RepresentationError(ValueError):
    """Policy shape does not match the demand representation."""


class InfeasibleError(ValueError):
    """The zero policy violates the box, so the instance has no feasible set."""


@dataclass(frozen=True)
class StepPolicy:
    """Two-level schedule ``b1`` on [0, t1], ``b2`` on (t1, 1]."""

    b1: float
    b2: float

    def as_array(self) -> np.ndarray:
        return np.array([self.b1, self.b2], dtype=float)


@dataclass(frozen=True)
class ScalarK:
    """Step policy ``k (D - mean D)``; k = 1 flattens net demand to the mean."""

    k: float

    def to_step(self, D: StepDemand) -> StepPolicy:
        m = D.mean
        return StepPolicy(self.k * (D.d1 - m), self.k * (D.d2 - m))


def as_vector(B, D) -> np.ndarray:
    """Coerce any policy form to the flat vector for ``D``."""
    if isinstance(B, ScalarK):
        if not isinstance(D, StepDemand):
            raise RepresentationError("ScalarK policies need a StepDemand")
        B = B.to_step(D)
    if isinstance(B, StepPolicy):
        if not isinstance(D, StepDemand):
            raise RepresentationError("StepPolicy needs a StepDemand")
        return B.as_array()
    v = np.asarray(B, dtype=float)
    if v.shape[-1:] != D.values.shape:
        raise RepresentationError(f"policy has shape {v.shape}, demand layout has {D.values.shape}")
    return v


@dataclass(frozen=True)
class FeasibleSet:
    """Box on net demand plus optional power, capacity and ramp limits.

    ``box=None`` uses the demand object's own normalization ``[lo, hi]``.
    """

    box: tuple[float, float] | None = None
    power: float | None = None
    capacity: float | None = None
    ramp: float | None = None

    def __post_init__(self):
        if self.box is not None:
            lo, hi = self.box
            if lo > hi:
                raise ValueError("box needs lo <= hi")
            object.__setattr__(self, "box", (float(lo), float(hi)))
        for name in ("power", "capacity", "ramp"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} limit must be nonnegative")

    def bounds(self, D) -> tuple[float, float]:
        return self.box if self.box is not None else (D.lo, D.hi)

    def coordinate_bounds(self, D) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.bounds(D)
        lb = D.values - hi
        ub = D.values - lo
        if self.power is not None:
            lb = np.maximum(lb, -self.power)
            ub = np.minimum(ub, self.power)
        return lb, ub

    def require_zero_feasible(self, D) -> None:
        lo, hi = self.bounds(D)
        v = D.values
        if np.any(v < lo - 1e-12) or np.any(v > hi + 1e-12):
            raise InfeasibleError(
                f"demand leaves the box [{lo}, {hi}] (range {v.min():.6g}..{v.max():.6g}); "
                "the do-nothing policy is infeasible"
            )

    def to_dict(self) -> dict:
        out: dict = {}
        if self.box is not None:
            out["box"] = list(self.box)
        for name in ("power", "capacity", "ramp"):
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        return out

    @classmethod
    def from_dict(cls, spec: dict | None) -> "FeasibleSet":
        spec = dict(spec or {})
        unknown = set(spec) - {"box", "power", "capacity", "ramp"}
        if unknown:
            raise ValueError(f"unknown constraint(s): {sorted(unknown)}")
        box = spec.get("box")
        if box is not None:
            if len(box) != 2:
                raise ValueError("box must be [lo, hi]")
            box = (float(box[0]), float(box[1]))
        opt = {k: (None if spec.get(k) is None else float(spec[k])) for k in ("power", "capacity", "ramp")}
        return cls(box=box, **opt)


@dataclass(frozen=True)
class FeasibilityReport:
    feasible: bool
    violations: dict
    tol: float


def _path_cumulative(B: np.ndarray, D, path: np.ndarray) -> np.ndarray:
    dt = D.durations[path]
    q = np.cumsum(B[..., path] * dt, axis=-1)
    zero = np.zeros(q.shape[:-1] + (1,))
    return np.concatenate([zero, q], axis=-1)


def violations(B, D, S: FeasibleSet) -> dict:
    """Worst violation per constraint family; ``B`` may carry batch axes."""
    B = as_vector(B, D)
    lo, hi = S.bounds(D)
    net = D.values - B
    out = {
        "box": np.maximum(np.maximum(net - hi, lo - net), 0.0).max(axis=-1),
        "periodicity": np.zeros(B.shape[:-1]),
        "non_anticipativity": np.zeros(B.shape[:-1]),
    }
    cap = np.zeros(B.shape[:-1])
    for path in D.paths:
        Q = _path_cumulative(B, D, path)
        out["periodicity"] = np.maximum(out["periodicity"], np.abs(Q[..., -1]))
        if S.capacity is not None:
            cap = np.maximum(cap, Q.max(axis=-1) - Q.min(axis=-1) - S.capacity)
    if S.power is not None:
        out["power"] = np.maximum(np.abs(B).max(axis=-1) - S.power, 0.0)
    if S.capacity is not None:
        out["capacity"] = np.maximum(cap, 0.0)
    if S.ramp is not None:
        e = D.edges
        if len(e):
            jump = np.abs(B[..., e[:, 1]] - B[..., e[:, 0]]) - S.ramp * D.edge_gaps
            out["ramp"] = np.maximum(jump.max(axis=-1), 0.0)
        else:
            out["ramp"] = np.zeros(B.shape[:-1])
    if B.ndim == 1:
        out = {k: float(v) for k, v in out.items()}
    return out


def check(B, D, S: FeasibleSet, tol: float = 1e-9) -> FeasibilityReport:
    """Evaluate every constraint; periodicity is checked per sample path."""
    v = violations(B, D, S)
    return FeasibilityReport(all(x <= tol for x in v.values()), v, tol)


def feasible_mask(B: np.ndarray, D, S: FeasibleSet, tol: float = 1e-9) -> np.ndarray:
    v = violations(B, D, S)
    mask = np.ones(np.asarray(B).shape[:-1], dtype=bool)
    for x in v.values():
        mask &= x <= tol
    return mask


@dataclass
class ProjectionResult:
    policy: np.ndarray
    converged: bool
    sweeps: int
    polished: bool = False
    method: str = "dykstra"


# Above this many sample paths the periodicity rows are handled one at a
# time instead of through a dense factorization.
EQ_BLOCK_MAX = 2000
_ACTIVE_SET_ROUNDS = 20
ACTIVE_SET_MAX = 400


class Projector:
    """Reusable projector onto the feasible set of one (demand, constraints) pair."""

    def __init__(self, D, S: FeasibleSet | None = None):
        S = S or FeasibleSet()
        S.require_zero_feasible(D)
        self.D, self.S = D, S
        self.w = D.durations * D.probabilities
        if np.any(self.w <= 0):
            raise ValueError("every decision entry needs positive probability and duration")
        self.winv = 1.0 / self.w
        self.lb, self.ub = S.coordinate_bounds(D)
        self._build_rows()
        self._cols: dict[int, tuple] = {}

    def _build_rows(self):
        D, S = self.D, self.S
        N = D.values.size
        dt = D.durations
        eq_rows, eq_cols, eq_vals = [], [], []
        rows, cols, vals, lo, hi = [], [], [], [], []

        def add(idx, coef, a, b):
            r = len(lo)
            rows.extend([r] * len(idx))
            cols.extend(idx)
            vals.extend(coef)
            lo.append(a)
            hi.append(b)

        block = len(D.paths) <= EQ_BLOCK_MAX
        for k, path in enumerate(D.paths):
            if block:
                eq_rows.extend([k] * len(path))
                eq_cols.extend(path)
                eq_vals.extend(dt[path])
            else:
                add(path, dt[path], 0.0, 0.0)
        if S.ramp is not None:
            for (u, v), gap in zip(D.edges, D.edge_gaps):
                r = S.ramp * gap
                add([u, v], [-1.0, 1.0], -r, r)
        if S.capacity is not None:
            seen = set()
            c = S.capacity
            for path in D.paths:
                L = len(path)
                for i in range(L):
                    for j in range(i + 1, L + 1):
                        key = (path[i], path[j - 1])
                        if key not in seen:
                            seen.add(key)
                            seg = path[i:j]
                            add(seg, dt[seg], -c, c)
        self.A = sp.csr_matrix((vals, (rows, cols)), shape=(len(lo), N))
        self.AT = self.A.T.tocsr()
        self.slab_lo = np.array(lo, dtype=float)
        self.slab_hi = np.array(hi, dtype=float)
        self.q = np.asarray(self.A.multiply(self.A) @ self.winv).ravel()
        if block:
            self.E = sp.csr_matrix((eq_vals, (eq_rows, eq_cols)), shape=(len(D.paths), N))
            M = (self.E.multiply(self.winv) @ self.E.T).toarray()
            self._eq_factor = cho_factor(M)
        else:
            self.E = sp.csr_matrix((0, N))
            self._eq_factor = None

    @property
    def num_sets(self) -> int:
        return self.slab_lo.size + 1 + (self.E.shape[0] > 0)

    def _column(self, j: int):
        col = self._cols.get(j)
        if col is None:
            dx = self.AT[:, [j]].toarray().ravel() * self.winv
            kj = self.A @ dx
            nz = np.flatnonzero(kj)
            col = (dx, nz, kj[nz], float(np.max(np.abs(dx))))
            self._cols[j] = col
        return col

    def _eq_project(self, x: np.ndarray) -> np.ndarray:
        lam = cho_solve(self._eq_factor, self.E @ x)
        return x - self.winv * (self.E.T @ lam)

    def project(self, y, tol: float = 1e-9, max_iter: int | None = None, method: str = "auto") -> ProjectionResult:
        """Project ``y`` (vector for this layout) onto the feasible set.

        ``method="dykstra"`` runs alternating projections (see
        :meth:`dykstra`).  ``"active-set"`` runs the exact dual active-set
        solver.  ``"auto"`` uses the active-set solver up to
        ``ACTIVE_SET_MAX`` entries (falling back to Dykstra if its iteration
        budget runs out) and Dykstra above that, where dense active-set
        algebra gets expensive and only box-type limits are usual.
        """
        if method not in ("auto", "dykstra", "active-set"):
            raise ValueError(f"unknown projection method {method!r}")
        y = as_vector(y, self.D).astype(float)
        if method == "active-set" or (method == "auto" and y.size <= ACTIVE_SET_MAX):
            res = self.dual_active_set(y, tol=tol)
            if res.converged or method == "active-set":
                return res
        return self.dykstra(y, tol=tol, max_iter=max_iter)

    def dykstra(self, y, tol: float = 1e-9, max_iter: int | None = None, polish: bool = True) -> ProjectionResult:
        """Dykstra's alternating projections over box, equalities and slabs.

        Stops when a full Dykstra sweep changes the iterate and every
        correction term by less than ``tol`` (max norm), or when the KKT
        system on the current active set yields a verified optimum.  After
        ``max_iter`` sweeps (default ``50 * num_sets``) the last iterate
        comes back with ``converged=False``.
        """
        y = as_vector(y, self.D).astype(float)
        if max_iter is None:
            max_iter = 50 * self.num_sets
        lo, hi, q = self.slab_lo, self.slab_hi, self.q
        m = lo.size
        x = y.copy()
        p = np.zeros_like(x)
        mu = np.zeros(m)
        scale = 1.0 + float(np.max(np.abs(y)))
        thresh = 1e-15 * scale
        next_polish = 8
        sweeps = 0
        while sweeps < max_iter:
            sweeps += 1
            x_prev, p_prev = x.copy(), p
            z = x + p
            x = np.clip(z, self.lb, self.ub)
            p = z - x
            if self._eq_factor is not None:
                x = self._eq_project(x)
            moved = 0.0
            if m:
                r = self.A @ x
                need = (mu != 0) | (r > hi + thresh) | (r < lo - thresh)
                heap = [int(j) for j in np.flatnonzero(need)]
                queued = np.zeros(m, dtype=bool)
                queued[heap] = True
                while heap:
                    j = heapq.heappop(heap)
                    queued[j] = False
                    s = r[j] + mu[j] * q[j]
                    if s > hi[j]:
                        new = (s - hi[j]) / q[j]
                    elif s < lo[j]:
                        new = (s - lo[j]) / q[j]
                    else:
                        new = 0.0
                    c = mu[j] - new
                    mu[j] = new
                    if c == 0.0:
                        continue
                    dx, nz, kv, dmax = self._column(j)
                    moved = max(moved, abs(c) * dmax)
                    x += c * dx
                    r[nz] += c * kv
                    later = nz[nz > j]
                    if later.size:
                        rl = r[later]
                        hit = later[
                            ~queued[later]
                            & ((mu[later] != 0) | (rl > hi[later] + thresh) | (rl < lo[later] - thresh))
                        ]
                        for i in hit:
                            heapq.heappush(heap, int(i))
                        queued[hit] = True
            change = max(float(np.max(np.abs(x - x_prev))), float(np.max(np.abs(p - p_prev))), moved)
            done = change < tol
            if polish and (done or sweeps >= next_polish):
                next_polish *= 2
                refined = self._polish(y, p, mu)
                if refined is not None:
                    return ProjectionResult(refined, True, sweeps, True)
            if done:
                return ProjectionResult(x, True, sweeps)
        return ProjectionResult(x, False, sweeps)

    def _halfspaces(self):
        # every inequality written as n . x >= b: slab sides, then box sides
        if getattr(self, "_hs", None) is None:
            ineq = self.slab_lo < self.slab_hi
            Ai = self.A[np.flatnonzero(ineq)]
            N = self.lb.size
            I = sp.identity(N, format="csr")
            G = sp.vstack([Ai, -Ai, I, -I]).tocsr()
            b = np.concatenate([self.slab_lo[ineq], -self.slab_hi[ineq], self.lb, -self.ub])
            norms = np.sqrt(np.asarray(G.multiply(G) @ self.winv).ravel())
            eq = self.A[np.flatnonzero(~ineq)]
            Eall = sp.vstack([self.E, eq]).tocsr() if eq.shape[0] else self.E
            self._hs = (G, b, norms, Eall)
        return self._hs

    def dual_active_set(self, y, tol: float = 1e-9, max_iter: int | None = None) -> ProjectionResult:
        """Exact projection by the Goldfarb-Idnani dual active-set method.

        Starts from the projection onto the equality constraints, which is
        dual feasible, and repeatedly adds the most violated half-space,
        dropping active ones whose multiplier would turn negative.  Ends
        with an exact solve of the KKT system on the final active set.
        ``converged=False`` means the iteration budget (default
        ``10 * (N + 10)``) ran out.
        """
        y = as_vector(y, self.D).astype(float)
        G, b, norms, Eall = self._halfspaces()
        N = y.size
        winv = self.winv
        ne = Eall.shape[0]
        cols = [_csr_row(Eall, i, N) for i in range(ne)]
        x = y.copy()
        if ne:
            NA = np.column_stack(cols)
            x = y - winv * (NA @ np.linalg.solve(NA.T @ (winv[:, None] * NA), NA.T @ y))
        act: list[int] = []
        u: list[float] = []
        if max_iter is None:
            max_iter = 10 * (N + 10)
        scale = 1.0 + float(np.max(np.abs(y)))
        feas_tol = min(tol, 1e-9) * scale
        steps = 0
        while True:
            viol = (G @ x - b) / norms
            p_idx = int(np.argmin(viol))
            if viol[p_idx] >= -feas_tol:
                break
            n_p = _csr_row(G, p_idx, N)
            u_p = 0.0
            while True:
                steps += 1
                if steps > max_iter:
                    return ProjectionResult(x, False, steps, method="active-set")
                k = ne + len(act)
                if k:
                    NA = np.column_stack(cols)
                    WN = winv[:, None] * NA
                    r = np.linalg.solve(NA.T @ WN, WN.T @ n_p)
                    z = winv * n_p - WN @ r
                else:
                    r = np.zeros(0)
                    z = winv * n_p
                r_in = r[ne:]
                ua = np.array(u)
                pos = r_in > 1e-14
                t1, drop = np.inf, -1
                if pos.any():
                    ratios = np.where(pos, ua / np.where(pos, r_in, 1.0), np.inf)
                    drop = int(np.argmin(ratios))
                    t1 = float(ratios[drop])
                zn = float(z @ n_p)
                s_p = float(n_p @ x - b[p_idx])
                t2 = -s_p / zn if zn > 1e-14 * float(n_p @ (winv * n_p)) else np.inf
                if not np.isfinite(t1) and not np.isfinite(t2):
                    raise InfeasibleError("constraint set is empty")
                t = min(t1, t2)
                if np.isfinite(t2):
                    x = x + t * z
                u = list(ua - t * r_in)
                u_p += t
                if t2 <= t1:
                    act.append(p_idx)
                    u.append(u_p)
                    cols.append(n_p)
                    break
                del act[drop], u[drop], cols[ne + drop]
        # exact re-solve on the final active set removes drift from the steps
        if ne + len(act):
            NA = np.column_stack(cols)
            rhs = np.concatenate([np.zeros(ne), b[act]])
            WN = winv[:, None] * NA
            lam = np.linalg.solve(NA.T @ WN, NA.T @ y - rhs)
            x = y - WN @ lam
        x = np.clip(x, self.lb, self.ub)
        return ProjectionResult(x, True, steps, True, method="active-set")

    def _polish(self, y, p, mu):
        """Exact projection by an active-set loop seeded from Dykstra's state.

        The corrections ``p`` (box) and ``mu`` (slabs) give an initial guess
        of the active constraints.  Each round solves the equality-constrained
        problem on that set, adds violated constraints and releases those
        whose multiplier has the wrong sign.  Returns the point once the KKT
        conditions hold, or None if the guess does not settle.
        """
        scale = 1.0 + float(np.max(np.abs(y)))
        tiny = 1e-13 * scale
        slack = 1e-10 * scale
        at_ub = p > tiny
        at_lb = p < -tiny
        side = np.zeros(self.slab_lo.size)
        side[np.abs(mu) * self.q > tiny] = 1.0
        side *= np.sign(mu)
        side[(self.slab_lo == self.slab_hi)] = 1.0
        for _ in range(_ACTIVE_SET_ROUNDS):
            out, lam, nu, C, ok, unique = self._kkt_solve(y, at_ub, at_lb, side, slack)
            changed = False
            over, under = out > self.ub + slack, out < self.lb - slack
            if over.any() or under.any():
                at_ub |= over
                at_lb |= under
                at_ub &= ~under
                at_lb &= ~over
                changed = True
            if self.slab_lo.size:
                r = self.A @ out
                hi_v, lo_v = r > self.slab_hi + slack, r < self.slab_lo - slack
                if hi_v.any() or lo_v.any():
                    side[hi_v] = 1.0
                    side[lo_v] = -1.0
                    changed = True
            if not ok:
                # inconsistent active rows: drop the slab guesses, keep equalities
                side[self.slab_lo != self.slab_hi] = 0.0
                continue
            if changed:
                continue
            act = np.flatnonzero(side)
            is_eq = self.slab_lo[act] == self.slab_hi[act]
            upper = side[act] > 0
            lam_s = lam[self.E.shape[0]:]
            bad_s = ~is_eq & ((upper & (lam_s < -slack)) | (~upper & (lam_s > slack)))
            bad_ub = at_ub & (nu < -slack)
            bad_lb = at_lb & (nu > slack)
            if not (bad_s.any() or bad_ub.any() or bad_lb.any()):
                return np.clip(out, self.lb, self.ub)
            g = self.w * (y - out)
            if not unique and self._signed_multipliers_exist(C, self.E.shape[0], is_eq, upper, at_ub, at_lb, g, slack):
                return np.clip(out, self.lb, self.ub)
            side[act[bad_s]] = 0.0
            at_ub &= ~bad_ub
            at_lb &= ~bad_lb
        return None

    def _kkt_solve(self, y, at_ub, at_lb, side, slack):
        fixed = at_ub | at_lb
        free = ~fixed
        xf = np.where(at_ub, self.ub, self.lb)
        act = np.flatnonzero(side)
        C = sp.vstack([self.E, self.A[act]]).tocsr()
        target = np.concatenate(
            [np.zeros(self.E.shape[0]), np.where(side[act] > 0, self.slab_hi[act], self.slab_lo[act])]
        )
        out = y.copy()
        out[fixed] = xf[fixed]
        lam = np.zeros(C.shape[0])
        ok = True
        unique = True
        if C.shape[0]:
            Cd = C.toarray()
            Cf = Cd[:, free]
            sq = np.sqrt(self.winv[free])
            gap = target - Cd[:, fixed] @ xf[fixed] - Cf @ y[free]
            # minimum weighted-norm correction onto the affine set
            u = np.linalg.lstsq(Cf * sq, gap, rcond=None)[0]
            out[free] = y[free] + sq * u
            ok = not np.any(np.abs(Cd @ out - target) > slack)
            lam, _, rank, _ = np.linalg.lstsq(Cf.T, self.w[free] * (y[free] - out[free]), rcond=None)
            unique = rank == C.shape[0]
            nu = self.w * (y - out) - Cd.T @ lam
        else:
            nu = self.w * (y - out)
        return out, lam, nu, C, ok, unique

    def _signed_multipliers_exist(self, C, ne, is_eq, upper, at_ub, at_lb, g, slack) -> bool:
        # Dependent active rows make the min-norm multipliers arbitrary; look
        # for any sign-correct combination instead (nonnegative least squares
        # with each column oriented by its required sign).
        rows = C.toarray()
        orient = np.concatenate([np.ones(ne), np.where(upper, 1.0, -1.0)])
        free_sign = np.concatenate([np.ones(ne, dtype=bool), is_eq])
        cols = [rows.T * orient, (rows[free_sign].T * -orient[free_sign])]
        box = np.flatnonzero(at_ub | at_lb)
        unit = np.zeros((g.size, box.size))
        unit[box, np.arange(box.size)] = np.where(at_ub[box], 1.0, -1.0)
        cols.append(unit)
        M = np.hstack(cols)
        _, resid = nnls(M, g, maxiter=50 * M.shape[1] + 100)
        return resid <= slack


def _csr_row(M, i: int, n: int) -> np.ndarray:
    # dense copy of one CSR row without scipy's slicing overhead
    out = np.zeros(n)
    a, b = M.indptr[i], M.indptr[i + 1]
    out[M.indices[a:b]] = M.data[a:b]
    return out


def project(
    point, D, S: FeasibleSet | None = None, tol: float = 1e-9, max_iter: int | None = None, method: str = "auto"
) -> ProjectionResult:
    """One-shot projection; build a :class:`Projector` to reuse the setup."""
    return Projector(D, S).project(point, tol=tol, max_iter=max_iter, method=method)


def inner(X, Y, D) -> float:
    """``E[integral X Y dt]`` for vectors on the demand layout."""
    return float(np.dot(D.durations * D.probabilities, np.asarray(X) * np.asarray(Y)))
