"""Generic sparse MILP modelling and solving."""

from .audit import Violation, audit, row_residuals
from .bnb import solve_milp
from .model import (MilpModel, MilpSolution, ModelError, Sense, SolverConfig, SolveStats, Status,
                    VarKind, load_dump, relative_gap)
from .oracle import TooManyBinariesError, enumerate_oracle
from .simplex import LpResult, NumericalStallError, solve_lp

__all__ = [
    "MilpModel", "MilpSolution", "ModelError", "Sense", "SolverConfig", "SolveStats", "Status",
    "VarKind", "load_dump", "relative_gap", "audit", "row_residuals", "Violation", "solve_milp",
    "enumerate_oracle", "TooManyBinariesError", "solve_lp", "LpResult", "NumericalStallError",
]
