"""Best-bound branch-and-bound over binary variables."""

from __future__ import annotations

import heapq
import itertools
import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from .audit import row_residuals
from .model import GAP_EPS, MilpModel, MilpSolution, SolverConfig, SolveStats, Status, relative_gap
from .simplex import LpResult, choose_backend, solve_lp

logger = logging.getLogger(__name__)

ABS_GAP_TOL = 1e-9


@dataclass(frozen=True)
class _Fix:
    var: int
    value: float
    parent: "_Fix | None"


@dataclass(order=True)
class _Node:
    bound: float
    neg_depth: int
    seq: int
    fixes: _Fix | None = None


class _Search:
    def __init__(self, model: MilpModel, config: SolverConfig):
        self.model = model.seal()
        self.config = config
        self.backend = choose_backend(model, config.lp_backend)
        self.stats = SolveStats()
        self.start = time.perf_counter()
        self.incumbent: np.ndarray | None = None
        self.incumbent_obj = math.inf
        # rows touching each binary, for the rounding heuristic
        self.A_csc = model.A_csc
        self.row_tol = config.feasibility_tol * model.row_scale * 0.5

    # -- helpers ---------------------------------------------------------
    def elapsed(self) -> float:
        return time.perf_counter() - self.start

    def lp(self, lb, ub) -> LpResult:
        self.stats.lp_solves += 1
        return solve_lp(self.model, lb, ub, backend=self.backend,
                        feasibility_tol=self.config.feasibility_tol)

    def bounds_for(self, fixes: _Fix | None):
        lb = self.model.lb.copy()
        ub = self.model.ub.copy()
        node = fixes
        while node is not None:
            lb[node.var] = ub[node.var] = node.value
            node = node.parent
        return lb, ub

    def fractional(self, x) -> np.ndarray:
        idx = self.model.binary_idx
        frac = np.abs(x[idx] - np.round(x[idx]))
        return idx[frac > self.config.integrality_tol]

    def prune_level(self) -> float:
        if self.incumbent is None:
            return math.inf
        return self.incumbent_obj - 1e-9 * max(1.0, abs(self.incumbent_obj))

    def offer(self, x: np.ndarray, source: str) -> bool:
        """Accept ``x`` as incumbent if integral, feasible and improving."""
        model = self.model
        x = x.copy()
        x[model.binary_idx] = np.round(x[model.binary_idx])
        res = row_residuals(model, x)
        if np.any(res > self.config.feasibility_tol * model.row_scale):
            # re-solve the continuous part with binaries pinned
            lb, ub = model.lb.copy(), model.ub.copy()
            lb[model.binary_idx] = ub[model.binary_idx] = x[model.binary_idx]
            polished = self.lp(lb, ub)
            if polished.status is not Status.OPTIMAL:
                return False
            x = polished.x
        obj = model.objective_value(x)
        if obj < self.incumbent_obj - 1e-12 * max(1.0, abs(obj)):
            self.incumbent = x
            self.incumbent_obj = obj
            self.stats.incumbent_updates += 1
            logger.debug("incumbent %.10g from %s after %d nodes", obj, source, self.stats.nodes)
            return True
        return False

    def polish(self, x: np.ndarray, source: str) -> None:
        """Pin binaries at their values in ``x`` and optimise the rest."""
        model = self.model
        lb, ub = model.lb.copy(), model.ub.copy()
        vals = np.round(x[model.binary_idx])
        lb[model.binary_idx] = ub[model.binary_idx] = vals
        res = self.lp(lb, ub)
        if res.status is Status.OPTIMAL:
            self.offer(res.x, source + "+polish")
        else:
            self.offer(x, source)

    def simple_rounding(self, x: np.ndarray, lb, ub) -> np.ndarray | None:
        """Round fractional binaries one by one without breaking any row.

        Each binary takes its nearer integer if every row it touches stays
        satisfied with the other values held, otherwise the farther one;
        gives up when neither works.
        """
        model = self.model
        x = x.copy()
        act = model.A @ x
        A = self.A_csc
        rhs, sense, tol = model.rhs, model.sense, self.row_tol
        for j in self.fractional(x):
            lo, hi = A.indptr[j], A.indptr[j + 1]
            rows = A.indices[lo:hi]
            coef = A.data[lo:hi]
            near = float(np.round(x[j]))
            for v in (near, 1.0 - near):
                if v < lb[j] or v > ub[j]:
                    continue
                new_act = act[rows] + coef * (v - x[j])
                s = sense[rows]
                gap = new_act - rhs[rows]
                viol = np.where(s == -1, gap, np.where(s == 1, -gap, np.abs(gap)))
                if np.all(viol <= tol[rows]):
                    act[rows] = new_act
                    x[j] = v
                    break
            else:
                return None
        return x

    def dive(self, x: np.ndarray, lb, ub, max_lps: int) -> None:
        """Fix the least fractional binary to its nearer value and re-solve."""
        lb, ub = lb.copy(), ub.copy()
        for _ in range(max_lps):
            frac = self.fractional(x)
            if frac.size == 0:
                self.polish(x, "dive")
                return
            dist = np.abs(x[frac] - np.round(x[frac]))
            j = frac[np.lexsort((frac, dist))[0]]
            lb[j] = ub[j] = float(np.round(x[j]))
            res = self.lp(lb, ub)
            if res.status is not Status.OPTIMAL or res.objective >= self.prune_level():
                return
            x = res.x
            rounded = self.simple_rounding(x, lb, ub)
            if rounded is not None:
                self.polish(rounded, "dive-round")
                return

    # -- main loop ---------------------------------------------------------
    def run(self, hint=None) -> MilpSolution:
        cfg = self.config
        model = self.model
        if hint is not None:
            self.offer(np.asarray(hint, dtype=float), "hint")

        root = self.lp(model.lb, model.ub)
        self.stats.nodes = 1
        if root.status is Status.INFEASIBLE:
            return self.finish(Status.INFEASIBLE, math.inf)
        if root.status is Status.UNBOUNDED:
            return self.finish(Status.UNBOUNDED, -math.inf)

        seq = itertools.count()
        heap: list[_Node] = []
        pending = [(root, None, 0)]
        status = None
        while True:
            for res, fixes, depth in pending:
                self.expand(res, fixes, depth, heap, seq)
            pending = []
            global_bound = heap[0].bound if heap else self.incumbent_obj
            global_bound = min(global_bound, self.incumbent_obj)
            if not heap:
                status = Status.OPTIMAL if self.incumbent is not None else Status.INFEASIBLE
                break
            if self.incumbent is not None and (
                    relative_gap(self.incumbent_obj, global_bound) <= cfg.rel_gap_tol
                    or self.incumbent_obj - global_bound <= ABS_GAP_TOL):
                status = Status.GAP_LIMIT
                break
            if self.elapsed() > cfg.time_limit:
                status = Status.TIME_LIMIT
                break
            if self.stats.nodes >= cfg.max_nodes:
                status = Status.NODE_LIMIT
                break
            node = heapq.heappop(heap)
            if node.bound >= self.prune_level():
                continue
            lb, ub = self.bounds_for(node.fixes)
            res = self.lp(lb, ub)
            self.stats.nodes += 1
            if self.stats.nodes % 200 == 0:
                logger.info("node %d open %d incumbent %.8g bound %.8g (%.1fs)",
                            self.stats.nodes, len(heap), self.incumbent_obj, global_bound,
                            self.elapsed())
            pending.append((res, node.fixes, -node.neg_depth))

        bound = self.incumbent_obj if status is Status.OPTIMAL else global_bound
        if self.incumbent is None and status is Status.OPTIMAL:
            status = Status.INFEASIBLE
        return self.finish(status, bound)

    def expand(self, res: LpResult, fixes, depth, heap, seq) -> None:
        if res.status is Status.INFEASIBLE:
            return
        if res.status is Status.UNBOUNDED:
            # bounded binaries cannot make a node unbounded unless the root is
            raise RuntimeError("unbounded node relaxation below a bounded root")
        if res.objective >= self.prune_level():
            return
        x = res.x
        frac = self.fractional(x)
        if frac.size == 0:
            self.offer(x, "lp")
            return
        if self.config.heuristics:
            lb, ub = self.bounds_for(fixes)
            rounded = self.simple_rounding(x, lb, ub)
            if rounded is not None:
                self.polish(rounded, "rounding")
            elif depth == 0:
                self.dive(x, lb, ub, max_lps=max(20, 2 * frac.size))
            if res.objective >= self.prune_level():
                return
        # most fractional binary, lowest index on ties
        score = np.abs(x[frac] - 0.5)
        j = int(frac[np.lexsort((frac, score))[0]])
        up_first = x[j] >= 0.5
        for value in ((1.0, 0.0) if up_first else (0.0, 1.0)):
            heapq.heappush(heap, _Node(res.objective, -(depth + 1), next(seq),
                                       _Fix(j, value, fixes)))

    def finish(self, status: Status, bound: float) -> MilpSolution:
        self.stats.wall_time = self.elapsed()
        if self.incumbent is not None and math.isfinite(bound):
            bound = min(bound, self.incumbent_obj)
        return MilpSolution(status, self.incumbent,
                            None if self.incumbent is None else self.incumbent_obj,
                            bound, self.stats)


def solve_milp(model: MilpModel, config: SolverConfig | None = None, *,
               hint=None) -> MilpSolution:
    """Minimise ``model`` by LP-based branch-and-bound.

    Terminates when the relative gap ``|incumbent - bound| / max(|incumbent|,
    1e-9)`` reaches ``config.rel_gap_tol``, the tree is exhausted, or a
    resource limit fires. ``hint`` is an optional starting point; it is used
    only if integral and feasible.
    """
    config = config or SolverConfig()
    return _Search(model, config).run(hint)


__all__ = ["solve_milp", "GAP_EPS"]
