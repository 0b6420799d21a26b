"""The car-park energy management MILP and its cost accounting.

:func:`build` turns a :class:`~evpv.domain.ScenarioSnapshot` into a
:class:`~evpv.milp.MilpModel` over the steps ``[from_step, T)``. Variable
families, all non-negative:

per (step, EV)
    charge ``x+``, discharge ``x-``, reserve up/down offers, SOC ``B``,
    binaries ``active`` (holds a DC converter) and ``mode`` (1 = charging,
    0 = discharging)
per (step, charger)
    PV extraction, grid draw, grid feed, binary ``draw_mode``
per step
    site import and export

Presolve fixings, on top of the zero power outside each EV's stay:

* ``mode = 1`` when the EV cannot discharge (it only relaxes the charge cap);
* ``active = 1`` when the charger has at least as many converters as EVs
  present (the converter budget cannot bind);
* draw, feed and ``draw_mode`` pinned when no EV is present at a charger,
  since with lossy conversion only ``feed = eta**2 * pv`` balances.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, TextIO

import numpy as np

from .domain import (EvSession, InvalidScenarioError, ReserveBoundConvention, ReserveMode,
                     ScenarioSnapshot, departure_target)
from .milp import MilpModel, MilpSolution, Sense, VarKind, audit

logger = logging.getLogger(__name__)


class HorizonExhaustedError(ValueError):
    """``from_step`` is at or beyond the end of the horizon."""


class NoIncumbentError(ValueError):
    """A solution without values cannot be turned into a schedule."""


class AuditError(RuntimeError):
    def __init__(self, violations):
        self.violations = violations
        head = "; ".join(str(v) for v in violations[:5])
        super().__init__(f"{len(violations)} constraint violation(s): {head}")


@dataclass
class VariableCatalog:
    """Index maps from (step, EV/charger) to model variable ids.

    Rows of every array are local steps ``t - from_step``.
    """

    from_step: int
    horizon_steps: int
    ev_ids: tuple[str, ...]
    charger_ids: tuple[str, ...]
    charge: np.ndarray
    discharge: np.ndarray
    reserve_up: np.ndarray
    reserve_down: np.ndarray
    soc: np.ndarray
    pv: np.ndarray
    draw: np.ndarray
    feed: np.ndarray
    grid_import: np.ndarray
    grid_export: np.ndarray
    active: np.ndarray
    mode: np.ndarray
    draw_mode: np.ndarray
    model: MilpModel | None = field(default=None, repr=False)

    @property
    def steps(self) -> range:
        return range(self.from_step, self.horizon_steps)

    def families(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in (
            "charge", "discharge", "reserve_up", "reserve_down", "soc", "pv", "draw", "feed",
            "grid_import", "grid_export", "active", "mode", "draw_mode")}

    def counts(self) -> tuple[int, int]:
        """(continuous, binary) variable counts."""
        fam = self.families()
        binary = sum(fam[k].size for k in ("active", "mode", "draw_mode"))
        total = sum(a.size for a in fam.values())
        return total - binary, binary


@dataclass
class Schedule:
    """Per-step dispatch over ``[from_step, T)``; powers in kW, SOC in kWh."""

    from_step: int
    ev_ids: tuple[str, ...]
    charger_ids: tuple[str, ...]
    charge_kw: np.ndarray
    discharge_kw: np.ndarray
    reserve_up_kw: np.ndarray
    reserve_down_kw: np.ndarray
    soc_kwh: np.ndarray
    pv_kw: np.ndarray
    draw_kw: np.ndarray
    feed_kw: np.ndarray
    import_kw: np.ndarray
    export_kw: np.ndarray
    active: np.ndarray | None = None
    mode: np.ndarray | None = None
    draw_mode: np.ndarray | None = None

    @property
    def num_steps(self) -> int:
        return self.charge_kw.shape[0]

    @classmethod
    def zeros(cls, snapshot: ScenarioSnapshot, from_step: int = 0) -> "Schedule":
        n = snapshot.horizon_steps - from_step
        V, C = len(snapshot.fleet), len(snapshot.chargers)
        z = lambda *shape: np.zeros(shape)  # noqa: E731
        return cls(from_step, tuple(ev.id for ev in snapshot.fleet),
                   tuple(c.id for c in snapshot.chargers),
                   z(n, V), z(n, V), z(n, V), z(n, V), z(n, V), z(n, C), z(n, C), z(n, C),
                   z(n), z(n))

    SERIES_EV = ("charge_kw", "discharge_kw", "reserve_up_kw", "reserve_down_kw", "soc_kwh")
    SERIES_CHARGER = ("pv_kw", "draw_kw", "feed_kw")
    SERIES_SITE = ("import_kw", "export_kw")

    def rows(self):
        """Long-format records ``(step, entity, series, value)``."""
        for k in range(self.num_steps):
            t = self.from_step + k
            for name in self.SERIES_EV:
                arr = getattr(self, name)
                for i, ev in enumerate(self.ev_ids):
                    yield t, f"ev:{ev}", name, float(arr[k, i])
            for name in self.SERIES_CHARGER:
                arr = getattr(self, name)
                for i, c in enumerate(self.charger_ids):
                    yield t, f"charger:{c}", name, float(arr[k, i])
            for name in self.SERIES_SITE:
                yield t, "site", name, float(getattr(self, name)[k])

    def write_csv(self, out: TextIO) -> None:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["step", "entity", "series", "value"])
        for t, entity, series, value in self.rows():
            writer.writerow([t, entity, series, _fmt(value)])


def _fmt(value: float) -> str:
    if value == 0:
        return "0"
    return repr(round(value, 12))


@dataclass
class CostReport:
    """Objective decomposition ($) plus baseline fields.

    ``total_usd = penalty + energy_trade - reserve_income + v2g_wear + pv_cost``.
    Baseline reports fill ``ev_cost_usd``, ``pv_sales_usd`` and ``net_usd``.
    """

    penalty_usd: float = 0.0
    energy_trade_usd: float = 0.0
    reserve_income_usd: float = 0.0
    v2g_wear_usd: float = 0.0
    pv_cost_usd: float = 0.0
    total_usd: float = 0.0
    ev_cost_usd: float | None = None
    pv_sales_usd: float | None = None
    net_usd: float | None = None
    policy: str = "OPT"

    def signed_components(self) -> dict[str, float]:
        return {"penalty": self.penalty_usd, "energy_trade": self.energy_trade_usd,
                "reserve_income": -self.reserve_income_usd, "v2g_wear": self.v2g_wear_usd,
                "pv_cost": self.pv_cost_usd}

    def __add__(self, other: "CostReport") -> "CostReport":
        def add(a, b):
            if a is None and b is None:
                return None
            return (a or 0.0) + (b or 0.0)
        return CostReport(
            self.penalty_usd + other.penalty_usd, self.energy_trade_usd + other.energy_trade_usd,
            self.reserve_income_usd + other.reserve_income_usd,
            self.v2g_wear_usd + other.v2g_wear_usd, self.pv_cost_usd + other.pv_cost_usd,
            self.total_usd + other.total_usd, add(self.ev_cost_usd, other.ev_cost_usd),
            add(self.pv_sales_usd, other.pv_sales_usd), add(self.net_usd, other.net_usd),
            self.policy)

    def write_report(self, out: TextIO) -> None:
        out.write(f"policy: {self.policy}\n")
        rows = [("penalty_usd", self.penalty_usd), ("energy_trade_usd", self.energy_trade_usd),
                ("reserve_income_usd", self.reserve_income_usd),
                ("v2g_wear_usd", self.v2g_wear_usd), ("pv_cost_usd", self.pv_cost_usd),
                ("total_usd", self.total_usd)]
        for name in ("ev_cost_usd", "pv_sales_usd", "net_usd"):
            if getattr(self, name) is not None:
                rows.append((name, getattr(self, name)))
        for name, value in rows:
            out.write(f"{name}: {value:.6f}\n")


# -- model construction --------------------------------------------------------------

def _reserve_caps(charge_limit: float, discharge_limit: float,
                  convention: ReserveBoundConvention) -> tuple[float, float]:
    """Caps for (discharge + up-reserve, charge + down-reserve)."""
    if convention is ReserveBoundConvention.AS_PRINTED:
        return charge_limit, discharge_limit
    return discharge_limit, charge_limit


def build(snapshot: ScenarioSnapshot, from_step: int = 0,
          soc: Mapping[str, float] | None = None) -> tuple[MilpModel, VariableCatalog]:
    """Formulate the scheduling MILP for steps ``[from_step, T)``.

    ``soc`` gives the realized SOC at ``from_step`` for every EV that
    arrived before it; it replaces the arrival SOC as the initial condition
    while the departure target stays at ``arrival SOC + demand``.
    """
    snapshot.validate()
    T, s, dt = snapshot.horizon_steps, from_step, snapshot.step_hours
    if not 0 <= s < T:
        raise HorizonExhaustedError(f"from_step {s} outside horizon [0, {T})")
    soc = dict(soc or {})
    fleet, chargers = snapshot.fleet, snapshot.chargers
    V, C, n = len(fleet), len(chargers), T - s
    cidx = {c.id: i for i, c in enumerate(chargers)}
    ev_charger = [cidx[ev.charger_id] for ev in fleet]
    for ev in fleet:
        if ev.arrival_step < s and ev.id not in soc:
            raise InvalidScenarioError(f"realized SOC of EV {ev.id} needed at step {s}")

    model = MilpModel(f"ems[{s}:{T}]")
    add = model.add_var
    BIN = VarKind.BINARY

    def grid(shape, prefix, kind=VarKind.CONTINUOUS, ub=math.inf):
        out = np.empty(shape, dtype=np.int64)
        for k in range(shape[0]):
            for i in range(shape[1]):
                out[k, i] = add(f"{prefix}[{s + k},{i}]", kind, 0.0, ub)
        return out

    xp = grid((n, V), "x_ch")
    xm = grid((n, V), "x_dis")
    rup = grid((n, V), "r_up")
    rdn = grid((n, V), "r_dn")
    B = grid((n, V), "soc")
    pv = grid((n, C), "p_pv")
    draw = grid((n, C), "p_draw")
    feed = grid((n, C), "p_feed")
    imp = np.array([add(f"g_imp[{s + k}]") for k in range(n)], dtype=np.int64)
    exp = np.array([add(f"g_exp[{s + k}]") for k in range(n)], dtype=np.int64)
    ac = grid((n, V), "a_conv", BIN, 1.0)
    ach = grid((n, V), "a_mode", BIN, 1.0)
    adf = grid((n, C), "a_drawfeed", BIN, 1.0)
    catalog = VariableCatalog(s, T, tuple(ev.id for ev in fleet), tuple(c.id for c in chargers),
                              xp, xm, rup, rdn, B, pv, draw, feed, imp, exp, ac, ach, adf, model)

    cons = model.add_constraint
    LE, EQ = Sense.LE, Sense.EQ
    present = np.array([[ev.present(s + k) for ev in fleet] for k in range(n)], dtype=bool).reshape(n, V)

    # -- EV constraints
    for i, ev in enumerate(fleet):
        ch = chargers[ev_charger[i]]
        x_ub = ev.charge_max_kw
        L = -ev.discharge_min_kw if snapshot.v2g_enabled else 0.0
        cap_dis_up, cap_ch_dn = _reserve_caps(x_ub, L, snapshot.reserve_bound_convention)
        if (snapshot.reserves_enabled and cap_ch_dn == 0.0
                and any(present[:, i])):
            logger.warning("EV %s: charge + down-reserve capped at 0 kW by the %s reserve bounds; "
                           "it cannot charge", ev.id, snapshot.reserve_bound_convention.value)
        target = departure_target(ev)
        for k in range(n):
            t = s + k
            if not present[k, i]:
                for fam in (xp, xm, rup, rdn, ac, ach):
                    model.fix(fam[k, i], 0.0)
            else:
                model.set_bounds(xp[k, i], ub=ch.ev_port_rated_kw)
                model.set_bounds(xm[k, i], ub=min(ch.ev_port_rated_kw, L))
                if not snapshot.reserves_enabled:
                    model.fix(rup[k, i], 0.0)
                    model.fix(rdn[k, i], 0.0)
                if L == 0.0:
                    model.fix(ach[k, i], 1.0)
                tag = f"[{t},{ev.id}]"
                cons({xp[k, i]: 1.0, ac[k, i]: -x_ub}, LE, 0.0, f"charge_active{tag}")
                cons({xp[k, i]: 1.0, ach[k, i]: -x_ub}, LE, 0.0, f"charge_mode{tag}")
                if L > 0:
                    cons({xm[k, i]: 1.0, ac[k, i]: -L}, LE, 0.0, f"discharge_active{tag}")
                    cons({xm[k, i]: 1.0, ach[k, i]: L}, LE, L, f"discharge_mode{tag}")
                # charge tapers to zero between S_ch*Bmax and Bmax
                slope = x_ub / (1.0 - snapshot.taper_charge)
                cons({xp[k, i]: 1.0, B[k, i]: slope / ev.soc_max_kwh}, LE, slope, f"charge_taper{tag}")
                if L > 0:
                    cons({xm[k, i]: 1.0, B[k, i]: -L / (snapshot.taper_discharge * ev.soc_max_kwh)},
                         LE, 0.0, f"discharge_taper{tag}")
                cons({xm[k, i]: 1.0, rup[k, i]: 1.0, ac[k, i]: -ch.ev_port_rated_kw}, LE, 0.0,
                     f"reserve_up_active{tag}")
                cons({xp[k, i]: 1.0, rdn[k, i]: 1.0, ac[k, i]: -ch.ev_port_rated_kw}, LE, 0.0,
                     f"reserve_dn_active{tag}")
                if snapshot.reserves_enabled:
                    cons({xm[k, i]: 1.0, rup[k, i]: 1.0}, LE, cap_dis_up, f"reserve_up_cap{tag}")
                    cons({xp[k, i]: 1.0, rdn[k, i]: 1.0}, LE, cap_ch_dn, f"reserve_dn_cap{tag}")
                    if snapshot.reserve_mode is ReserveMode.SYMMETRIC:
                        cons({rup[k, i]: 1.0, rdn[k, i]: -1.0}, EQ, 0.0, f"sym{tag}")

            # SOC bounds and boundary conditions
            if t < ev.arrival_step:
                model.fix(B[k, i], 0.0)
            elif t == s and ev.arrival_step < s:
                model.fix(B[k, i], float(soc[ev.id]))
            elif t == ev.arrival_step:
                model.fix(B[k, i], ev.arrival_soc_kwh)
            else:
                upper = ev.soc_max_kwh
                if t == ev.departure_step:
                    upper = min(upper, target)  # departure target
                model.set_bounds(B[k, i], lb=ev.soc_min_kwh, ub=upper)
        # SOC recursion
        for k in range(n - 1):
            t = s + k
            if t < ev.arrival_step:
                continue
            cons({B[k + 1, i]: 1.0, B[k, i]: -1.0, xp[k, i]: -dt * ev.eff_charge,
                  xm[k, i]: dt / ev.eff_discharge}, EQ, 0.0, f"soc[{t},{ev.id}]")

    # -- charger constraints
    for c_i, ch in enumerate(chargers):
        evs = [i for i in range(V) if ev_charger[i] == c_i]
        avail = snapshot.pv_available_kw(ch)
        eta = ch.eff_conv
        for k in range(n):
            t = s + k
            tag = f"[{t},{ch.id}]"
            here = [i for i in evs if present[k, i]]
            model.set_bounds(pv[k, c_i], ub=float(avail[t]))
            if not snapshot.curtailment_enabled:
                model.set_bounds(pv[k, c_i], lb=float(avail[t]))
            model.set_bounds(draw[k, c_i], ub=ch.inverter_rated_kw)
            model.set_bounds(feed[k, c_i], ub=ch.inverter_rated_kw)
            if not here:
                model.fix(draw[k, c_i], 0.0)
                model.fix(adf[k, c_i], 0.0)
            if len(here) <= ch.dc_converter_count:
                for i in here:
                    model.fix(ac[k, i], 1.0)
            # DC-link balance
            row = {pv[k, c_i]: eta, draw[k, c_i]: eta, feed[k, c_i]: -1.0 / eta}
            for i in evs:
                row[xm[k, i]] = eta
                row[xp[k, i]] = -1.0 / eta
            cons(row, EQ, 0.0, f"dc_link{tag}")
            cons({draw[k, c_i]: 1.0, adf[k, c_i]: -ch.inverter_rated_kw}, LE, 0.0, f"draw_mode{tag}")
            cons({feed[k, c_i]: 1.0, adf[k, c_i]: ch.inverter_rated_kw}, LE,
                 ch.inverter_rated_kw, f"feed_mode{tag}")
            if snapshot.reserves_enabled:
                up = {rup[k, i]: 1.0 for i in evs}
                up[feed[k, c_i]] = 1.0
                cons(up, LE, ch.inverter_rated_kw, f"inverter_up{tag}")
                dn = {rdn[k, i]: 1.0 for i in evs}
                dn[draw[k, c_i]] = 1.0
                cons(dn, LE, ch.inverter_rated_kw, f"inverter_dn{tag}")
            if here:
                cons({ac[k, i]: 1.0 for i in evs}, LE, float(ch.dc_converter_count), f"converters{tag}")

    # -- site constraints
    for k in range(n):
        t = s + k
        row = {imp[k]: -1.0, exp[k]: 1.0}
        for c_i in range(C):
            row[draw[k, c_i]] = 1.0
            row[feed[k, c_i]] = -1.0
        cons(row, EQ, 0.0, f"site_balance[{t}]")
        model.set_bounds(imp[k], ub=float(snapshot.limits.import_cap_kw[t]))
        model.set_bounds(exp[k], ub=float(snapshot.limits.export_cap_kw[t]))

    # -- objective
    mk = snapshot.market
    y = snapshot.pv.uncertainty
    for i, ev in enumerate(fleet):
        if ev.departure_step >= s:
            model.add_objective_constant(ev.penalty_rate * departure_target(ev))
            model.add_objective(B[ev.departure_step - s, i], -ev.penalty_rate)
    for k in range(n):
        t = s + k
        model.add_objective(imp[k], dt * mk.buy_price[t])
        model.add_objective(exp[k], -dt * mk.sell_price[t])
        for i, ev in enumerate(fleet):
            if not present[k, i]:
                continue
            eta2 = chargers[ev_charger[i]].eff_conv ** 2
            scale = dt * (1.0 - y) * eta2
            if snapshot.reserves_enabled:
                model.add_objective(rup[k, i], -scale * mk.regup_price[t])
                model.add_objective(rdn[k, i], -scale * mk.regdn_price[t])
            if snapshot.wear_rate:
                model.add_objective(xm[k, i], dt * snapshot.wear_rate)
    model.add_objective_constant(pv_cost_constant(snapshot, s))
    model.seal()
    return model, catalog


def pv_cost_constant(snapshot: ScenarioSnapshot, from_step: int = 0, to_step: int | None = None) -> float:
    """Contracted PV energy cost over ``[from_step, to_step)``; decision independent."""
    if snapshot.pv_cost == 0:
        return 0.0
    sl = slice(from_step, to_step)
    total = sum(float(snapshot.pv_available_kw(c)[sl].sum()) for c in snapshot.chargers)
    return snapshot.step_hours * snapshot.pv_cost * total


# -- solution mapping -------------------------------------------------------------

def schedule_from_values(values, catalog: VariableCatalog) -> Schedule:
    x = np.asarray(values, dtype=float)
    take = lambda idx: x[idx].copy()  # noqa: E731
    return Schedule(
        catalog.from_step, catalog.ev_ids, catalog.charger_ids,
        take(catalog.charge), take(catalog.discharge), take(catalog.reserve_up),
        take(catalog.reserve_down), take(catalog.soc), take(catalog.pv), take(catalog.draw),
        take(catalog.feed), take(catalog.grid_import), take(catalog.grid_export),
        np.round(x[catalog.active]).astype(int), np.round(x[catalog.mode]).astype(int),
        np.round(x[catalog.draw_mode]).astype(int))


def values_from_schedule(schedule: Schedule, catalog: VariableCatalog) -> np.ndarray:
    """Inverse of :func:`schedule_from_values`.

    The schedule may start earlier than the catalog and may list extra EVs
    or chargers; entries are matched by id. Variables the model fixes take
    their fixed value.
    """
    model = catalog.model
    if model is None:
        raise ValueError("catalog has no model")
    off = catalog.from_step - schedule.from_step
    n = catalog.horizon_steps - catalog.from_step
    if off < 0 or schedule.num_steps < off + n:
        raise ValueError(f"schedule covers steps [{schedule.from_step}, "
                         f"{schedule.from_step + schedule.num_steps}), need "
                         f"[{catalog.from_step}, {catalog.horizon_steps})")
    x = np.zeros(model.num_vars)
    ev_cols = [schedule.ev_ids.index(e) for e in catalog.ev_ids]
    ch_cols = [schedule.charger_ids.index(c) for c in catalog.charger_ids]
    rows = slice(off, off + n)
    pairs = [("charge", "charge_kw", ev_cols), ("discharge", "discharge_kw", ev_cols),
             ("reserve_up", "reserve_up_kw", ev_cols), ("reserve_down", "reserve_down_kw", ev_cols),
             ("soc", "soc_kwh", ev_cols), ("pv", "pv_kw", ch_cols), ("draw", "draw_kw", ch_cols),
             ("feed", "feed_kw", ch_cols), ("active", "active", ev_cols), ("mode", "mode", ev_cols),
             ("draw_mode", "draw_mode", ch_cols)]
    for fam, attr, cols in pairs:
        data = getattr(schedule, attr)
        if data is None:
            raise ValueError(f"schedule lacks {attr}")
        x[getattr(catalog, fam)] = np.asarray(data, dtype=float)[rows][:, cols]
    x[catalog.grid_import] = schedule.import_kw[rows]
    x[catalog.grid_export] = schedule.export_kw[rows]
    fixed = model.lb == model.ub
    x[fixed] = model.lb[fixed]
    return x


def extract_schedule(solution: MilpSolution, catalog: VariableCatalog,
                     snapshot: ScenarioSnapshot | None = None, feasibility_tol: float = 1e-6) -> Schedule:
    """Map an incumbent back to a :class:`Schedule`, rounding binaries exactly.

    The rounded point is re-audited against the model; any violation raises
    :class:`AuditError`.
    """
    if solution.values is None:
        raise NoIncumbentError(f"solution has no incumbent (status {solution.status.value})")
    x = np.asarray(solution.values, dtype=float).copy()
    model = catalog.model
    if model is not None:
        x[model.binary_idx] = np.round(x[model.binary_idx])
        violations = audit(model, x, feasibility_tol)
        if violations:
            raise AuditError(violations)
    # clear solver noise below the feasibility tolerance
    x[np.abs(x) < 1e-10] = 0.0
    return schedule_from_values(x, catalog)


def cost_breakdown(schedule: Schedule, snapshot: ScenarioSnapshot) -> CostReport:
    """Recompute the five objective components from a schedule.

    Covers steps ``[schedule.from_step, T)``; the penalty counts EVs whose
    departure step lies in that window.
    """
    T, s, dt = snapshot.horizon_steps, schedule.from_step, snapshot.step_hours
    n = T - s
    V, C = len(snapshot.fleet), len(snapshot.chargers)
    expected = {"charge_kw": (n, V), "soc_kwh": (n, V), "pv_kw": (n, C), "import_kw": (n,)}
    for name, shape in expected.items():
        if getattr(schedule, name).shape != shape:
            raise ValueError(f"schedule {name} has shape {getattr(schedule, name).shape}, "
                             f"expected {shape}")
    mk = snapshot.market
    window = slice(s, T)
    penalty = 0.0
    for i, ev in enumerate(snapshot.fleet):
        if ev.departure_step >= s:
            shortfall = departure_target(ev) - schedule.soc_kwh[ev.departure_step - s, i]
            penalty += ev.penalty_rate * shortfall
    energy = dt * math.fsum(schedule.import_kw * mk.buy_price[window]
                            - schedule.export_kw * mk.sell_price[window])
    eta2 = np.array([snapshot.charger_of(ev).eff_conv ** 2 for ev in snapshot.fleet])
    per_step = (schedule.reserve_up_kw * mk.regup_price[window, None]
                + schedule.reserve_down_kw * mk.regdn_price[window, None]) * eta2[None, :]
    reserve = dt * (1.0 - snapshot.pv.uncertainty) * math.fsum(per_step.ravel())
    wear = dt * snapshot.wear_rate * math.fsum(schedule.discharge_kw.ravel())
    pv_cost = pv_cost_constant(snapshot, s)
    total = penalty + energy - reserve + wear + pv_cost
    return CostReport(penalty, energy, reserve, wear, pv_cost, total)
