"""Exhaustive enumeration over binary assignments, for cross-checking."""

from __future__ import annotations

import itertools
import math
import time

import numpy as np

from .model import MilpModel, MilpSolution, SolveStats, Status
from .simplex import solve_lp


class TooManyBinariesError(ValueError):
    pass


def enumerate_oracle(model: MilpModel, max_binaries: int = 20, *,
                     backend: str = "native") -> MilpSolution:
    """Exact optimum by solving the LP for every assignment of free binaries.

    Binaries already fixed by presolve are not enumerated. Ties keep the
    first assignment in lexicographic order.
    """
    model.seal()
    start = time.perf_counter()
    free = [int(j) for j in model.binary_idx if model.lb[j] != model.ub[j]]
    if len(free) > max_binaries:
        raise TooManyBinariesError(
            f"{len(free)} free binaries exceeds the enumeration limit of {max_binaries}")
    stats = SolveStats()
    best_x, best_obj = None, math.inf
    unbounded = False
    for assignment in itertools.product((0.0, 1.0), repeat=len(free)):
        lb, ub = model.lb.copy(), model.ub.copy()
        lb[free] = ub[free] = assignment
        res = solve_lp(model, lb, ub, backend=backend)
        stats.lp_solves += 1
        if res.status is Status.UNBOUNDED:
            unbounded = True
            continue
        if res.status is Status.OPTIMAL and res.objective < best_obj - 1e-12 * max(1.0, abs(best_obj) if math.isfinite(best_obj) else 1.0):
            best_x, best_obj = res.x, res.objective
    stats.nodes = stats.lp_solves
    stats.wall_time = time.perf_counter() - start
    if unbounded:
        return MilpSolution(Status.UNBOUNDED, None, None, -math.inf, stats)
    if best_x is None:
        return MilpSolution(Status.INFEASIBLE, None, None, math.inf, stats)
    x = best_x.copy()
    x[model.binary_idx] = np.round(x[model.binary_idx])
    return MilpSolution(Status.OPTIMAL, x, best_obj, best_obj, stats)
