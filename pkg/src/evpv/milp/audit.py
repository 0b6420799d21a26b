"""Independent feasibility check of a candidate point against a model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import MilpModel


@dataclass(frozen=True)
class Violation:
    kind: str  # "row", "bound" or "integrality"
    index: int
    name: str
    residual: float

    def __str__(self):
        return f"{self.kind} {self.name}: residual {self.residual:.3g}"


def row_residuals(model: MilpModel, x) -> np.ndarray:
    """Amount by which each row is violated (0 when satisfied)."""
    model.seal()
    act = model.A @ np.asarray(x, dtype=float)
    gap = act - model.rhs
    return np.where(model.sense == -1, np.maximum(gap, 0.0),
                    np.where(model.sense == 1, np.maximum(-gap, 0.0), np.abs(gap)))


def audit(model: MilpModel, values, feasibility_tol: float = 1e-6,
          integrality_tol: float = 1e-6) -> list[Violation]:
    """List every row, bound and integrality violation beyond tolerance.

    Row tolerances scale with ``max(1, |rhs|)``; bound tolerances with
    ``max(1, |bound|)``.
    """
    model.seal()
    x = np.asarray(values, dtype=float)
    if x.shape != (model.num_vars,):
        raise ValueError(f"expected {model.num_vars} values, got {x.shape}")
    report = []
    res = row_residuals(model, x)
    for i in np.flatnonzero(res > feasibility_tol * model.row_scale):
        report.append(Violation("row", int(i), model.row_name(i), float(res[i])))
    low = model.lb - x
    high = x - model.ub
    with np.errstate(invalid="ignore"):
        bad_low = low > feasibility_tol * np.maximum(1.0, np.abs(model.lb))
        bad_high = high > feasibility_tol * np.maximum(1.0, np.abs(model.ub))
    for j in np.flatnonzero(bad_low):
        report.append(Violation("bound", int(j), model.var_name(j), float(low[j])))
    for j in np.flatnonzero(bad_high):
        report.append(Violation("bound", int(j), model.var_name(j), float(high[j])))
    frac = np.abs(x[model.binary_idx] - np.round(x[model.binary_idx]))
    for k in np.flatnonzero(frac > integrality_tol):
        j = int(model.binary_idx[k])
        report.append(Violation("integrality", j, model.var_name(j), float(frac[k])))
    return report
