"""Sparse MILP container, solver settings and solution record."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, TextIO

import numpy as np
import scipy.sparse as sp


class ModelError(ValueError):
    """Malformed model: bad bounds, unknown variable, non-finite coefficient."""


class VarKind(str, enum.Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"


class Sense(str, enum.Enum):
    LE = "<="
    EQ = "="
    GE = ">="


class Status(str, enum.Enum):
    OPTIMAL = "optimal"
    GAP_LIMIT = "gap_limit"
    TIME_LIMIT = "time_limit"
    NODE_LIMIT = "node_limit"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


GAP_EPS = 1e-9


def relative_gap(incumbent: float, bound: float) -> float:
    return abs(incumbent - bound) / max(abs(incumbent), GAP_EPS)


@dataclass(frozen=True)
class Variable:
    index: int
    name: str
    kind: VarKind
    lb: float
    ub: float


@dataclass(frozen=True)
class Constraint:
    index: int
    name: str
    coeffs: tuple[tuple[int, float], ...]
    sense: Sense
    rhs: float


class MilpModel:
    """Minimisation MILP with sparse rows and bounded variables.

    Build with :meth:`add_var`, :meth:`add_constraint` and
    :meth:`set_objective`; :meth:`fix` is the presolve hook for pinning a
    variable. :meth:`seal` freezes the model and materialises the sparse
    matrix; solvers seal implicitly.
    """

    def __init__(self, name: str = "model"):
        self.name = name
        self._names: list[str] = []
        self._kinds: list[VarKind] = []
        self._lb: list[float] = []
        self._ub: list[float] = []
        self._rows: list[tuple[int, ...]] = []
        self._vals: list[tuple[float, ...]] = []
        self._senses: list[Sense] = []
        self._rhs: list[float] = []
        self._row_names: list[str] = []
        self._obj: dict[int, float] = {}
        self.obj_offset = 0.0
        self._sealed = False

    # -- construction -----------------------------------------------------
    def _check_open(self):
        if self._sealed:
            raise ModelError("model is sealed")

    def add_var(self, name: str, kind: VarKind = VarKind.CONTINUOUS,
                lb: float = 0.0, ub: float = math.inf) -> int:
        self._check_open()
        kind = VarKind(kind)
        if kind is VarKind.BINARY:
            lb, ub = max(0.0, lb), min(1.0, ub)
            if lb not in (0.0, 1.0) or ub not in (0.0, 1.0):
                raise ModelError(f"binary {name} needs integral bounds")
        if math.isnan(lb) or math.isnan(ub) or lb > ub:
            raise ModelError(f"variable {name}: invalid bounds [{lb}, {ub}]")
        if lb == -math.inf and ub == math.inf:
            raise ModelError(f"variable {name}: free variables are not supported")
        self._names.append(name)
        self._kinds.append(kind)
        self._lb.append(float(lb))
        self._ub.append(float(ub))
        return len(self._names) - 1

    def add_constraint(self, coeffs: Mapping[int, float] | Iterable[tuple[int, float]],
                       sense: Sense | str, rhs: float, name: str = "") -> int:
        self._check_open()
        items = coeffs.items() if isinstance(coeffs, Mapping) else coeffs
        merged: dict[int, float] = {}
        n = len(self._names)
        for j, a in items:
            if not 0 <= j < n:
                raise ModelError(f"constraint {name}: unknown variable {j}")
            if not math.isfinite(a):
                raise ModelError(f"constraint {name}: non-finite coefficient")
            merged[j] = merged.get(j, 0.0) + float(a)
        if not math.isfinite(rhs):
            raise ModelError(f"constraint {name}: non-finite right-hand side")
        cols = tuple(sorted(j for j, a in merged.items() if a != 0.0))
        self._rows.append(cols)
        self._vals.append(tuple(merged[j] for j in cols))
        self._senses.append(Sense(sense))
        self._rhs.append(float(rhs))
        self._row_names.append(name or f"r{len(self._rhs) - 1}")
        return len(self._rhs) - 1

    def set_objective(self, coeffs: Mapping[int, float] | Iterable[tuple[int, float]],
                      constant: float = 0.0) -> None:
        self._check_open()
        items = coeffs.items() if isinstance(coeffs, Mapping) else coeffs
        self._obj = {}
        for j, a in items:
            if not math.isfinite(a):
                raise ModelError("non-finite objective coefficient")
            self._obj[j] = self._obj.get(j, 0.0) + float(a)
        self.obj_offset = float(constant)

    def add_objective(self, j: int, coef: float) -> None:
        self._check_open()
        self._obj[j] = self._obj.get(j, 0.0) + float(coef)

    def add_objective_constant(self, value: float) -> None:
        self._check_open()
        self.obj_offset += float(value)

    def fix(self, j: int, value: float) -> None:
        """Pin variable ``j`` to ``value`` (presolve hook)."""
        self._check_open()
        if self._kinds[j] is VarKind.BINARY and value not in (0, 1):
            raise ModelError(f"binary {self._names[j]} fixed to {value}")
        self._lb[j] = self._ub[j] = float(value)

    def set_bounds(self, j: int, lb: float | None = None, ub: float | None = None) -> None:
        self._check_open()
        if lb is not None:
            self._lb[j] = float(lb)
        if ub is not None:
            self._ub[j] = float(ub)
        if self._lb[j] > self._ub[j]:
            raise ModelError(f"variable {self._names[j]}: empty bounds")

    # -- sealed view ----------------------------------------------------------
    def seal(self) -> "MilpModel":
        if self._sealed:
            return self
        n, m = len(self._names), len(self._rhs)
        indptr = np.zeros(m + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([len(r) for r in self._rows])
        indices = np.fromiter((j for r in self._rows for j in r), dtype=np.int64, count=indptr[-1])
        data = np.fromiter((a for r in self._vals for a in r), dtype=float, count=indptr[-1])
        self.A = sp.csr_matrix((data, indices, indptr), shape=(m, n))
        self.A_csc = self.A.tocsc()
        self.lb = np.array(self._lb, dtype=float)
        self.ub = np.array(self._ub, dtype=float)
        self.c = np.zeros(n)
        for j, a in self._obj.items():
            self.c[j] = a
        self.rhs = np.array(self._rhs, dtype=float)
        sense_code = {Sense.LE: -1, Sense.EQ: 0, Sense.GE: 1}
        self.sense = np.array([sense_code[s] for s in self._senses], dtype=np.int8)
        self.is_binary = np.array([k is VarKind.BINARY for k in self._kinds], dtype=bool)
        self.binary_idx = np.flatnonzero(self.is_binary)
        # each row's scale for relative tolerances
        self.row_scale = np.maximum(1.0, np.abs(self.rhs))
        for arr in (self.lb, self.ub, self.c, self.rhs, self.sense, self.is_binary, self.row_scale):
            arr.setflags(write=False)
        self._sealed = True
        return self

    @property
    def sealed(self) -> bool:
        return self._sealed

    @property
    def num_vars(self) -> int:
        return len(self._names)

    @property
    def num_constraints(self) -> int:
        return len(self._rhs)

    @property
    def num_binaries(self) -> int:
        return sum(k is VarKind.BINARY for k in self._kinds)

    def var_name(self, j: int) -> str:
        return self._names[j]

    def row_name(self, i: int) -> str:
        return self._row_names[i]

    def variable(self, j: int) -> Variable:
        return Variable(j, self._names[j], self._kinds[j], self._lb[j], self._ub[j])

    def constraint(self, i: int) -> Constraint:
        return Constraint(i, self._row_names[i], tuple(zip(self._rows[i], self._vals[i])),
                          self._senses[i], self._rhs[i])

    def variables(self) -> list[Variable]:
        return [self.variable(j) for j in range(self.num_vars)]

    def constraints(self) -> list[Constraint]:
        return [self.constraint(i) for i in range(self.num_constraints)]

    def objective_value(self, x) -> float:
        self.seal()
        return float(self.c @ np.asarray(x, dtype=float)) + self.obj_offset

    def dump(self, out: TextIO) -> None:
        """Write the model in a line-oriented text format.

        ``var <name> <kind> <lb> <ub> <objcoef>`` per variable, then
        ``con <name> <sense> <rhs> <name>:<coef> ...`` per row, and a final
        ``offset <value>`` line.
        """
        self.seal()
        out.write(f"# model {self.name}: {self.num_vars} vars, {self.num_constraints} rows\n")
        for j in range(self.num_vars):
            out.write(f"var {self._names[j]} {self._kinds[j].value} {self._lb[j]!r} "
                      f"{self._ub[j]!r} {float(self.c[j])!r}\n")
        for i in range(self.num_constraints):
            terms = " ".join(f"{self._names[j]}:{a!r}" for j, a in zip(self._rows[i], self._vals[i]))
            out.write(f"con {self._row_names[i]} {self._senses[i].value} {self._rhs[i]!r} {terms}\n")
        out.write(f"offset {self.obj_offset!r}\n")


def load_dump(lines: Iterable[str]) -> MilpModel:
    """Inverse of :meth:`MilpModel.dump`."""
    model = MilpModel()
    index: dict[str, int] = {}
    objective: dict[int, float] = {}
    offset = 0.0
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        head, *rest = line.split()
        if head == "var":
            name, kind, lb, ub, cost = rest
            j = model.add_var(name, VarKind(kind), float(lb), float(ub))
            index[name] = j
            objective[j] = float(cost)
        elif head == "con":
            name, sense, rhs, *terms = rest
            coeffs = []
            for term in terms:
                vname, coef = term.rsplit(":", 1)
                coeffs.append((index[vname], float(coef)))
            model.add_constraint(coeffs, Sense(sense), float(rhs), name)
        elif head == "offset":
            offset = float(rest[0])
        else:
            raise ModelError(f"line {lineno}: unknown record {head!r}")
    model.set_objective(objective, offset)
    return model


@dataclass
class SolverConfig:
    rel_gap_tol: float = 1.5e-4
    time_limit: float = 600.0
    max_nodes: int = 1_000_000
    branch_rule: str = "most_fractional"
    node_selection: str = "best_bound"
    feasibility_tol: float = 1e-6
    integrality_tol: float = 1e-6
    lp_backend: str = "auto"  # "native", "highs" or "auto" (size based)
    heuristics: bool = True

    def __post_init__(self):
        if self.branch_rule != "most_fractional":
            raise ValueError(f"unsupported branch rule {self.branch_rule!r}")
        if self.node_selection != "best_bound":
            raise ValueError(f"unsupported node selection {self.node_selection!r}")
        if self.lp_backend not in ("auto", "native", "highs"):
            raise ValueError(f"unknown LP backend {self.lp_backend!r}")


@dataclass
class SolveStats:
    nodes: int = 0
    lp_solves: int = 0
    wall_time: float = 0.0
    incumbent_updates: int = 0


@dataclass
class MilpSolution:
    status: Status
    values: np.ndarray | None
    objective: float | None
    bound: float
    stats: SolveStats = field(default_factory=SolveStats)

    @property
    def gap(self) -> float:
        if self.objective is None:
            return math.inf
        return relative_gap(self.objective, self.bound)

    @property
    def has_incumbent(self) -> bool:
        return self.values is not None
