"""LP relaxations: a bounded-variable two-phase primal simplex, plus HiGHS.

The native solver is a dense revised simplex that keeps nonbasic variables
at one of their bounds, so box constraints never become rows. Pricing is
Dantzig's rule with a Harris two-pass ratio test; after ``stall_pivots``
pivots without objective progress it falls back to Bland's rule, which
cannot cycle. Large relaxations go to HiGHS through scipy.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .model import MilpModel, Status

logger = logging.getLogger(__name__)

NATIVE_MAX_ROWS = 400
NATIVE_MAX_COLS = 800


class NumericalStallError(RuntimeError):
    """The simplex hit its pivot limit without reaching a verdict."""


@dataclass
class LpResult:
    status: Status
    x: np.ndarray | None
    objective: float | None
    iterations: int = 0


def choose_backend(model: MilpModel, backend: str = "auto") -> str:
    if backend != "auto":
        return backend
    model.seal()
    small = model.num_constraints <= NATIVE_MAX_ROWS and model.num_vars <= NATIVE_MAX_COLS
    return "native" if small else "highs"


def solve_lp(model: MilpModel, lb=None, ub=None, *, backend: str = "auto",
             feasibility_tol: float = 1e-6) -> LpResult:
    """Solve the continuous relaxation of ``model`` (binaries become [lb, ub]).

    ``lb``/``ub`` override the model's bounds, which is how branch-and-bound
    expresses its node subproblems.
    """
    model.seal()
    lb = model.lb if lb is None else np.asarray(lb, dtype=float)
    ub = model.ub if ub is None else np.asarray(ub, dtype=float)
    if np.any(lb > ub + 1e-12):
        return LpResult(Status.INFEASIBLE, None, None)
    backend = choose_backend(model, backend)
    if backend == "native":
        result = _solve_native(model, lb, ub)
    elif backend == "highs":
        result = _solve_highs(model, lb, ub)
    else:
        raise ValueError(f"unknown LP backend {backend!r}")
    if result.x is not None:
        x = np.clip(result.x, lb, ub)
        result.x = x
        result.objective = float(model.c @ x) + model.obj_offset
    return result


# -- HiGHS -----------------------------------------------------------------------

def _highs_arrays(model: MilpModel):
    cached = getattr(model, "_highs_cache", None)
    if cached is not None:
        return cached
    A = model.A
    le = model.sense == -1
    ge = model.sense == 1
    eq = model.sense == 0
    ub_rows = sp.vstack([A[le], -A[ge]]).tocsr() if (le.any() or ge.any()) else None
    b_ub = np.concatenate([model.rhs[le], -model.rhs[ge]]) if ub_rows is not None else None
    eq_rows = A[eq].tocsr() if eq.any() else None
    b_eq = model.rhs[eq] if eq_rows is not None else None
    cached = (ub_rows, b_ub, eq_rows, b_eq)
    model._highs_cache = cached
    return cached


def _solve_highs(model: MilpModel, lb: np.ndarray, ub: np.ndarray) -> LpResult:
    A_ub, b_ub, A_eq, b_eq = _highs_arrays(model)
    bounds = np.column_stack([lb, np.where(np.isinf(ub), np.inf, ub)])
    res = linprog(model.c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds,
                  method="highs-ds", options={"presolve": True})
    iters = int(getattr(res, "nit", 0) or 0)
    if res.status == 0:
        return LpResult(Status.OPTIMAL, np.asarray(res.x, dtype=float), float(res.fun), iters)
    if res.status == 2:
        return LpResult(Status.INFEASIBLE, None, None, iters)
    if res.status == 3:
        return LpResult(Status.UNBOUNDED, None, None, iters)
    raise NumericalStallError(f"HiGHS returned status {res.status}: {res.message}")


# -- native bounded-variable simplex ----------------------------------------------------

def _solve_native(model: MilpModel, lb: np.ndarray, ub: np.ndarray) -> LpResult:
    A = model.A.toarray()
    m, n = A.shape
    b = model.rhs.astype(float)
    # slack s_i with A_i x + s_i = b_i; its bounds encode the row sense
    s_lb = np.where(model.sense == 1, -np.inf, 0.0)
    s_ub = np.where(model.sense == -1, np.inf, 0.0)
    if m == 0:
        return _solve_box_only(model.c, lb, ub)
    simplex = _BoundedSimplex(A, b, model.c, lb, ub, s_lb, s_ub)
    status = simplex.run()
    x = simplex.x[:n].copy() if status is Status.OPTIMAL else None
    obj = float(model.c @ x) if x is not None else None
    return LpResult(status, x, obj, simplex.iterations)


def _solve_box_only(c, lb, ub) -> LpResult:
    x = np.where(c > 0, lb, np.where(c < 0, ub, np.where(np.isfinite(lb), lb, ub)))
    if not np.all(np.isfinite(x)):
        return LpResult(Status.UNBOUNDED, None, None)
    return LpResult(Status.OPTIMAL, x.astype(float), float(c @ x))


class _BoundedSimplex:
    PIVOT_TOL = 1e-9
    PRIMAL_TOL = 1e-9
    DUAL_TOL = 1e-9
    REFACTOR_EVERY = 64

    def __init__(self, A, b, c, lb, ub, s_lb, s_ub, stall_pivots: int = 50,
                 max_iterations: int | None = None):
        m, n = A.shape
        self.m, self.n = m, n
        x0 = np.where(np.isfinite(lb), lb, ub).astype(float)
        if not np.all(np.isfinite(x0)):
            raise ValueError("every variable needs a finite bound")
        residual = b - A @ x0
        s0 = np.clip(residual, s_lb, s_ub)
        excess = residual - s0
        art_rows = np.flatnonzero(np.abs(excess) > self.PRIMAL_TOL * np.maximum(1.0, np.abs(b)))
        k = art_rows.size
        art = np.zeros((m, k))
        art[art_rows, np.arange(k)] = np.sign(excess[art_rows])
        self.A = np.hstack([A, np.eye(m), art])
        self.b = b
        self.lb = np.concatenate([lb, s_lb, np.zeros(k)])
        self.ub = np.concatenate([ub, s_ub, np.full(k, np.inf)])
        self.x = np.concatenate([x0, s0, np.abs(excess[art_rows])])
        self.cost = np.concatenate([c, np.zeros(m + k)])
        self.n_art = k
        self.basis = np.arange(n, n + m)
        self.basis[art_rows] = n + m + np.arange(k)
        self.stall_pivots = stall_pivots
        total = n + m + k
        self.max_iterations = max_iterations or max(1000, 50 * (m + total))
        self.iterations = 0

    # basis bookkeeping
    def _refactor(self):
        B = self.A[:, self.basis]
        try:
            self.Binv = np.linalg.inv(B)
        except np.linalg.LinAlgError as exc:
            raise NumericalStallError("singular basis") from exc
        nonbasic = np.ones(self.A.shape[1], dtype=bool)
        nonbasic[self.basis] = False
        rhs = self.b - self.A[:, nonbasic] @ self.x[nonbasic]
        self.x[self.basis] = self.Binv @ rhs

    def run(self) -> Status:
        self._refactor()
        if self.n_art:
            phase1 = np.zeros_like(self.cost)
            phase1[self.n + self.m:] = 1.0
            status = self._iterate(phase1)
            if status is not Status.OPTIMAL:
                raise NumericalStallError("phase 1 did not terminate normally")
            infeas = float(self.x[self.n + self.m:].sum())
            if infeas > self.PRIMAL_TOL * 1e3 * max(1.0, float(np.abs(self.b).max())):
                return Status.INFEASIBLE
            self.ub[self.n + self.m:] = 0.0
            self.x[self.n + self.m:] = 0.0
            self._drive_out_artificials()
        return self._iterate(self.cost)

    def _drive_out_artificials(self):
        first_art = self.n + self.m
        for r in range(self.m):
            if self.basis[r] < first_art:
                continue
            row = self.Binv[r] @ self.A[:, :first_art]
            row[self.basis[self.basis < first_art]] = 0.0
            candidates = np.flatnonzero(np.abs(row) > 1e-7)
            if candidates.size == 0:
                continue  # redundant row; the artificial stays basic at zero
            q = candidates[np.argmax(np.abs(row[candidates]))]
            alpha = self.Binv @ self.A[:, q]
            self._pivot(r, q, alpha)
        self._refactor()

    def _pivot(self, r, q, alpha):
        piv = alpha[r]
        self.Binv[r] /= piv
        others = np.arange(self.m) != r
        self.Binv[others] -= np.outer(alpha[others], self.Binv[r])
        self.basis[r] = q

    def _iterate(self, cost) -> Status:
        A, lb, ub, x = self.A, self.lb, self.ub, self.x
        movable = ub - lb > self.PRIMAL_TOL
        best = math.inf
        stall = 0
        bland = False
        since_refactor = 0
        while True:
            if self.iterations >= self.max_iterations:
                raise NumericalStallError(
                    f"simplex pivot limit {self.max_iterations} reached (anti-cycling engaged: {bland})")
            if since_refactor >= self.REFACTOR_EVERY:
                self._refactor()
                since_refactor = 0
            basis = self.basis
            y = cost[basis] @ self.Binv
            d = cost - y @ A
            nonbasic = np.ones(A.shape[1], dtype=bool)
            nonbasic[basis] = False
            at_lower = np.isfinite(lb) & (np.abs(x - lb) <= self.PRIMAL_TOL * np.maximum(1.0, np.abs(lb)))
            inc = nonbasic & movable & at_lower & (d < -self.DUAL_TOL)
            dec = nonbasic & movable & ~at_lower & (d > self.DUAL_TOL)
            eligible = inc | dec
            if not eligible.any():
                return Status.OPTIMAL
            if bland:
                q = int(np.flatnonzero(eligible)[0])
            else:
                score = np.where(eligible, np.abs(d), -1.0)
                q = int(np.argmax(score))
            direction = 1.0 if inc[q] else -1.0
            alpha = self.Binv @ A[:, q]
            dxb = -direction * alpha
            r, theta = self._ratio_test(dxb, bland)
            flip = ub[q] - lb[q]
            if r is None and not math.isfinite(flip):
                return Status.UNBOUNDED
            self.iterations += 1
            if r is None or flip <= theta:
                x[q] = ub[q] if direction > 0 else lb[q]
                x[basis] += flip * dxb
            else:
                x[q] += direction * theta
                x[basis] += theta * dxb
                leaving = basis[r]
                x[leaving] = lb[leaving] if dxb[r] < 0 else ub[leaving]
                self._pivot(r, q, alpha)
                since_refactor += 1
            obj = float(cost @ x)
            if obj < best - 1e-12 * max(1.0, abs(best) if math.isfinite(best) else 1.0):
                best = obj
                stall = 0
                bland = False
            else:
                stall += 1
                if stall >= self.stall_pivots:
                    bland = True

    def _ratio_test(self, dxb, bland):
        basis = self.basis
        xb = self.x[basis]
        lbb = self.lb[basis]
        ubb = self.ub[basis]
        tol = self.PIVOT_TOL
        down = dxb < -tol
        up = dxb > tol
        if not (down.any() or up.any()):
            return None, math.inf
        ratio = np.full(self.m, np.inf)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio[down] = np.maximum(xb[down] - lbb[down], 0.0) / -dxb[down]
            ratio[up] = np.maximum(ubb[up] - xb[up], 0.0) / dxb[up]
        if not np.isfinite(ratio).any():
            return None, math.inf
        if bland:
            theta = ratio.min()
            ties = np.flatnonzero(ratio <= theta + 1e-12)
            r = ties[np.argmin(basis[ties])]
            return int(r), float(theta)
        # Harris: relax bounds by the feasibility tolerance, then take the
        # largest pivot among rows that block within the relaxed step
        ftol = self.PRIMAL_TOL * 10
        relaxed = np.full(self.m, np.inf)
        with np.errstate(divide="ignore", invalid="ignore"):
            relaxed[down] = (xb[down] - lbb[down] + ftol) / -dxb[down]
            relaxed[up] = (ubb[up] - xb[up] + ftol) / dxb[up]
        theta_h = relaxed.min()
        candidates = np.flatnonzero(ratio <= theta_h)
        r = candidates[np.argmax(np.abs(dxb[candidates]))]
        return int(r), float(ratio[r])
