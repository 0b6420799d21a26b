"""Shrinking-horizon MPC: re-plan the rest of the day every step, commit one.

At step ``s`` the EMS rebuilds the MILP over ``[s, T)`` from the realized
SOC of every EV on site, solves it, and hands the first step of the plan to
:func:`plant_step`. The plant applies realized PV and arrivals, re-balances
each charger's DC link through its grid port and, if a network cap would be
crossed, scales powers down.

The previous plan, shifted by one step, is offered to the solver as a
starting incumbent; under zero disturbance it is still feasible, so most
re-solves close their gap at the root.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Mapping, TextIO

import numpy as np

from .domain import EvSession, InvalidScenarioError, ScenarioSnapshot, departure_target
from .formulation import (CostReport, Schedule, build, cost_breakdown, extract_schedule,
                          values_from_schedule)
from .milp import SolverConfig, solve_milp

logger = logging.getLogger(__name__)

OVERLAY_FIELDS = ("pv_multiplier", "arrival_step", "departure_step", "arrival_soc_kwh")


@dataclass
class DayTimeline:
    """A planned day plus what actually happens."""

    snapshot: ScenarioSnapshot
    pv_multiplier: np.ndarray | None = None
    arrival_overrides: dict[str, int] = field(default_factory=dict)
    departure_overrides: dict[str, int] = field(default_factory=dict)
    soc_overrides: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        T = self.snapshot.horizon_steps
        if self.pv_multiplier is None:
            self.pv_multiplier = np.ones(T)
        self.pv_multiplier = np.asarray(self.pv_multiplier, dtype=float)
        self.validate()

    def validate(self) -> None:
        snap = self.snapshot
        y = snap.pv.uncertainty
        if self.pv_multiplier.shape != (snap.horizon_steps,):
            raise InvalidScenarioError("pv_multiplier must have one entry per step")
        if np.any(np.abs(self.pv_multiplier - 1.0) > y + 1e-12):
            raise InvalidScenarioError(f"PV multipliers outside [1 - {y:g}, 1 + {y:g}]")
        known = {ev.id for ev in snap.fleet}
        for name in ("arrival_overrides", "departure_overrides", "soc_overrides"):
            unknown = set(getattr(self, name)) - known
            if unknown:
                raise InvalidScenarioError(f"{name} names unknown EV(s): {sorted(unknown)}")
        self.realized_snapshot().validate()

    def realized_session(self, ev: EvSession) -> EvSession:
        return dataclasses.replace(
            ev, arrival_step=self.arrival_overrides.get(ev.id, ev.arrival_step),
            departure_step=self.departure_overrides.get(ev.id, ev.departure_step),
            arrival_soc_kwh=self.soc_overrides.get(ev.id, ev.arrival_soc_kwh))

    def realized_snapshot(self) -> ScenarioSnapshot:
        return self.snapshot.with_fleet(self.realized_session(ev) for ev in self.snapshot.fleet)

    @property
    def is_deterministic(self) -> bool:
        return (not self.arrival_overrides and not self.departure_overrides
                and not self.soc_overrides and bool(np.all(self.pv_multiplier == 1.0)))


def load_overlay(path, snapshot: ScenarioSnapshot) -> DayTimeline:
    """Read a realization overlay CSV with columns ``step,entity,field,value``.

    ``pv_multiplier`` rows use entity ``site`` and a step; the other fields
    use entity ``ev:<id>`` and ignore the step column.
    """
    from .ingest import _read_rows, DataFormatError  # shared CSV plumbing

    mult = np.ones(snapshot.horizon_steps)
    arr, dep, soc = {}, {}, {}
    for line, row in _read_rows(path, ("step", "entity", "field", "value")):
        name, entity = row["field"], row["entity"]
        try:
            value = float(row["value"])
            if name == "pv_multiplier":
                mult[int(row["step"])] = value
            elif entity.startswith("ev:") and name in OVERLAY_FIELDS[1:]:
                target = {"arrival_step": arr, "departure_step": dep, "arrival_soc_kwh": soc}[name]
                target[entity[3:]] = int(value) if name.endswith("step") else value
            else:
                raise ValueError(f"unknown overlay field {name!r} for {entity!r}")
        except (ValueError, IndexError) as exc:
            raise DataFormatError(path, line, str(exc)) from None
    return DayTimeline(snapshot, mult, arr, dep, soc)


@dataclass
class StepSlice:
    """One step of dispatch for every EV and charger in a snapshot."""

    step: int
    charge_kw: np.ndarray
    discharge_kw: np.ndarray
    reserve_up_kw: np.ndarray
    reserve_down_kw: np.ndarray
    pv_kw: np.ndarray
    draw_kw: np.ndarray
    feed_kw: np.ndarray
    import_kw: float
    export_kw: float

    @classmethod
    def zeros(cls, step: int, V: int, C: int) -> "StepSlice":
        return cls(step, np.zeros(V), np.zeros(V), np.zeros(V), np.zeros(V),
                   np.zeros(C), np.zeros(C), np.zeros(C), 0.0, 0.0)

    def copy(self) -> "StepSlice":
        return dataclasses.replace(self, **{f.name: np.array(getattr(self, f.name))
                                            for f in dataclasses.fields(self)
                                            if isinstance(getattr(self, f.name), np.ndarray)})


@dataclass
class StepRecord:
    step: int
    status: str
    nodes: int
    gap: float
    wall_time: float
    plan_objective: float  # remaining-day plan, solver accounting
    committed_before: float  # realized cost of steps [0, step)
    step_cost: float
    fallback: bool = False
    events: list[str] = field(default_factory=list)

    @property
    def outlook(self) -> float:
        """Committed cost so far plus the cost of the plan for the rest."""
        return self.committed_before + self.plan_objective


@dataclass
class MpcTrace:
    realized: Schedule  # full day; SOC row t is the SOC at the start of step t
    records: list[StepRecord]
    cost: CostReport  # recomputed from the realized schedule
    accumulated_usd: float  # sum of per-step costs
    snapshot: ScenarioSnapshot  # realized fleet

    @property
    def flagged_steps(self) -> list[int]:
        return [r.step for r in self.records if r.fallback]

    def write_steps_csv(self, out: TextIO) -> None:
        """Per-step solver outcome and cost; wall times go to the summary only."""
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["step", "status", "nodes", "gap", "plan_objective_usd",
                         "step_cost_usd", "cumulative_usd", "fallback", "events"])
        total = 0.0
        for r in self.records:
            total += r.step_cost
            writer.writerow([r.step, r.status, r.nodes, f"{r.gap:.3e}",
                             f"{r.plan_objective:.9f}", f"{r.step_cost:.9f}", f"{total:.9f}",
                             int(r.fallback), "; ".join(r.events)])

    def write_summary(self, out: TextIO) -> None:
        self.cost.write_report(out)
        out.write(f"accumulated_usd: {self.accumulated_usd:.6f}\n")
        out.write(f"steps: {len(self.records)}\n")
        out.write(f"flagged_steps: {','.join(map(str, self.flagged_steps)) or 'none'}\n")
        out.write(f"total_nodes: {sum(r.nodes for r in self.records)}\n")
        out.write(f"total_wall_time_s: {sum(r.wall_time for r in self.records):.3f}\n")


# -- plant ------------------------------------------------------------------------------

def soc_update(soc: float, charge_kw: float, discharge_kw: float, ev: EvSession,
               step_hours: float) -> float:
    """SOC after one step; reserves carry no net energy."""
    return soc + step_hours * (charge_kw * ev.eff_charge - discharge_kw / ev.eff_discharge)


def plant_step(snapshot: ScenarioSnapshot, committed: StepSlice, soc: Mapping[str, float],
               pv_multiplier: float = 1.0) -> tuple[StepSlice, dict[str, float], list[str]]:
    """Apply a committed slice to the physical car park.

    ``snapshot`` holds the realized fleet; ``soc`` the SOC at the start of
    the step for EVs on site. Returns the realized slice, the SOC at the
    start of the next step (EVs present this step) and logged events.
    """
    t, dt = committed.step, snapshot.step_hours
    out = committed.copy()
    events: list[str] = []
    fleet, chargers = snapshot.fleet, snapshot.chargers
    here = np.array([ev.present(t) for ev in fleet], dtype=bool)
    for i in np.flatnonzero(~here):
        if out.charge_kw[i] or out.discharge_kw[i] or out.reserve_up_kw[i] or out.reserve_down_kw[i]:
            events.append(f"EV {fleet[i].id} absent; power dropped")
        out.charge_kw[i] = out.discharge_kw[i] = out.reserve_up_kw[i] = out.reserve_down_kw[i] = 0.0

    # keep every SOC inside its band
    for i in np.flatnonzero(here):
        ev = fleet[i]
        b = soc[ev.id]
        port = snapshot.charger_of(ev).ev_port_rated_kw
        xp = min(out.charge_kw[i], ev.charge_max_kw, port)
        xm = min(out.discharge_kw[i], -ev.discharge_min_kw, port)
        nxt = soc_update(b, xp, xm, ev, dt)
        if nxt > ev.soc_max_kwh + 1e-9 and xp > 0:
            xp = max(0.0, (ev.soc_max_kwh - b + dt * xm / ev.eff_discharge) / (dt * ev.eff_charge))
            events.append(f"EV {ev.id} charge clamped to {xp:.4g} kW at max SOC")
        elif nxt < ev.soc_min_kwh - 1e-9 and xm > 0:
            xm = max(0.0, (b - ev.soc_min_kwh + dt * xp * ev.eff_charge) * ev.eff_discharge / dt)
            events.append(f"EV {ev.id} discharge clamped to {xm:.4g} kW at min SOC")
        out.charge_kw[i], out.discharge_kw[i] = xp, xm

    cols = [[i for i, ev in enumerate(fleet) if ev.charger_id == c.id] for c in chargers]
    for c_i, c in enumerate(chargers):
        avail = float(snapshot.pv_available_kw(c)[t]) * pv_multiplier
        if out.pv_kw[c_i] > avail:
            out.pv_kw[c_i] = avail
        elif not snapshot.curtailment_enabled:
            out.pv_kw[c_i] = avail
        _balance(out, c_i, c, cols[c_i])
        # converter ratings: shed EV charge, then PV and V2G
        if out.draw_kw[c_i] > c.inverter_rated_kw + 1e-9:
            _scale(out.charge_kw, cols[c_i], _draw_fit(out, c_i, c, cols[c_i], c.inverter_rated_kw))
            events.append(f"charger {c.id}: draw over rating, charging scaled down")
            _balance(out, c_i, c, cols[c_i])
        if out.feed_kw[c_i] > c.inverter_rated_kw + 1e-9:
            _shed_feed(out, c_i, c, cols[c_i], c.inverter_rated_kw)
            events.append(f"charger {c.id}: feed over rating, PV/V2G scaled down")
            _balance(out, c_i, c, cols[c_i])

    # network caps
    net = float(out.draw_kw.sum() - out.feed_kw.sum())
    imp_cap = float(snapshot.limits.import_cap_kw[t])
    exp_cap = float(snapshot.limits.export_cap_kw[t])
    if net > imp_cap + 1e-9:
        _fit_site(out, snapshot, cols, imp_cap, "import")
        events.append(f"site import over {imp_cap:g} kW; charging scaled down")
    elif -net > exp_cap + 1e-9:
        _fit_site(out, snapshot, cols, exp_cap, "export")
        events.append(f"site export over {exp_cap:g} kW; PV/V2G scaled down")
    net = float(out.draw_kw.sum() - out.feed_kw.sum())
    # keep the planned split when it still closes the balance
    delta = net - (committed.import_kw - committed.export_kw)
    imp = committed.import_kw + max(delta, 0.0)
    exp = committed.export_kw + max(-delta, 0.0)
    if imp > imp_cap or exp > exp_cap:
        imp, exp = max(net, 0.0), max(-net, 0.0)
    out.import_kw, out.export_kw = imp, exp

    _fit_reserves(out, snapshot, cols, events)

    new_soc = {}
    for i in np.flatnonzero(here):
        ev = fleet[i]
        new_soc[ev.id] = soc_update(soc[ev.id], out.charge_kw[i], out.discharge_kw[i], ev, dt)
    for e in events:
        logger.info("step %d: %s", t, e)
    return out, new_soc, events


def _balance(out: StepSlice, c_i: int, c, cols) -> None:
    """Close the DC-link balance through the charger's grid port."""
    eta = c.eff_conv
    need = sum(out.charge_kw[i] for i in cols) / eta - eta * (
        out.pv_kw[c_i] + sum(out.discharge_kw[i] for i in cols))
    out.draw_kw[c_i] = need / eta if need > 0 else 0.0
    out.feed_kw[c_i] = -need * eta if need < 0 else 0.0


def _scale(arr: np.ndarray, cols, factor: float) -> None:
    for i in cols:
        arr[i] *= factor


def _draw_fit(out, c_i, c, cols, cap) -> float:
    """Factor on EV charging so that the grid draw equals ``cap``."""
    eta = c.eff_conv
    load = sum(out.charge_kw[i] for i in cols)
    if load <= 0:
        return 1.0
    supply = eta * (out.pv_kw[c_i] + sum(out.discharge_kw[i] for i in cols))
    return max(0.0, min(1.0, (eta * cap + supply) * eta / load))


def _shed_feed(out, c_i, c, cols, cap) -> None:
    """Scale PV and V2G together until the feed fits ``cap``."""
    eta = c.eff_conv
    load = sum(out.charge_kw[i] for i in cols) / eta
    source = eta * (out.pv_kw[c_i] + sum(out.discharge_kw[i] for i in cols))
    if source <= 0:
        return
    factor = max(0.0, min(1.0, (cap / eta + load) / source))
    out.pv_kw[c_i] *= factor
    _scale(out.discharge_kw, cols, factor)


def _fit_site(out, snapshot, cols, cap, direction) -> None:
    """Proportional scaling of all charging (import) or all PV/V2G (export)."""
    lo, hi = 0.0, 1.0
    base = out.copy()
    for _ in range(60):  # bisection on a common factor
        mid = (lo + hi) / 2
        trial = base.copy()
        for c_i, c in enumerate(snapshot.chargers):
            if direction == "import":
                _scale(trial.charge_kw, cols[c_i], mid)
            else:
                trial.pv_kw[c_i] *= mid
                _scale(trial.discharge_kw, cols[c_i], mid)
            _balance(trial, c_i, c, cols[c_i])
        net = float(trial.draw_kw.sum() - trial.feed_kw.sum())
        ok = net <= cap if direction == "import" else -net <= cap
        lo, hi = (mid, hi) if ok else (lo, mid)
    for c_i, c in enumerate(snapshot.chargers):
        if direction == "import":
            _scale(out.charge_kw, cols[c_i], lo)
        else:
            out.pv_kw[c_i] *= lo
            _scale(out.discharge_kw, cols[c_i], lo)
        _balance(out, c_i, c, cols[c_i])


def _fit_reserves(out, snapshot, cols, events) -> None:
    """Trim reserve offers to the port and converter headroom left."""
    for c_i, c in enumerate(snapshot.chargers):
        for i in cols[c_i]:
            port = c.ev_port_rated_kw
            up_room = max(0.0, port - out.discharge_kw[i])
            dn_room = max(0.0, port - out.charge_kw[i])
            if out.reserve_up_kw[i] > up_room + 1e-9 or out.reserve_down_kw[i] > dn_room + 1e-9:
                out.reserve_up_kw[i] = min(out.reserve_up_kw[i], up_room)
                out.reserve_down_kw[i] = min(out.reserve_down_kw[i], dn_room)
                events.append(f"EV {snapshot.fleet[i].id}: reserve offer trimmed to port headroom")
        for arr, grid in ((out.reserve_up_kw, out.feed_kw), (out.reserve_down_kw, out.draw_kw)):
            offered = sum(arr[i] for i in cols[c_i])
            room = max(0.0, c.inverter_rated_kw - grid[c_i])
            if offered > room + 1e-9:
                _scale(arr, cols[c_i], room / offered)
                events.append(f"charger {c.id}: reserve offer scaled to converter headroom")


# -- day loop ---------------------------------------------------------------------------

def _plan_snapshot(timeline: DayTimeline, s: int) -> tuple[ScenarioSnapshot, list[EvSession]]:
    """What the EMS knows at step ``s``: realized data for EVs that arrived."""
    plan = []
    for ev in timeline.snapshot.fleet:
        real = timeline.realized_session(ev)
        if real.arrival_step <= s:
            if real.departure_step > s:
                plan.append(real)
            continue
        if ev.arrival_step > s:
            plan.append(ev)
        elif s + 1 < ev.departure_step:  # late: expect it next step
            plan.append(dataclasses.replace(ev, arrival_step=s + 1))
    return timeline.snapshot.with_fleet(plan), plan


def _slice_from(schedule: Schedule, snapshot: ScenarioSnapshot, step: int) -> StepSlice:
    """Row ``step`` of a plan, laid out in ``snapshot``'s EV/charger order."""
    k = step - schedule.from_step
    V, C = len(snapshot.fleet), len(snapshot.chargers)
    out = StepSlice.zeros(step, V, C)
    for i, ev in enumerate(snapshot.fleet):
        if ev.id in schedule.ev_ids:
            j = schedule.ev_ids.index(ev.id)
            out.charge_kw[i] = schedule.charge_kw[k, j]
            out.discharge_kw[i] = schedule.discharge_kw[k, j]
            out.reserve_up_kw[i] = schedule.reserve_up_kw[k, j]
            out.reserve_down_kw[i] = schedule.reserve_down_kw[k, j]
    out.pv_kw[:] = schedule.pv_kw[k]
    out.draw_kw[:] = schedule.draw_kw[k]
    out.feed_kw[:] = schedule.feed_kw[k]
    out.import_kw = float(schedule.import_kw[k])
    out.export_kw = float(schedule.export_kw[k])
    return out


def _step_cost(snapshot: ScenarioSnapshot, sl: StepSlice, soc_next: Mapping[str, float]) -> float:
    """Realized objective contribution of one step (penalties at departure)."""
    t, dt, mk = sl.step, snapshot.step_hours, snapshot.market
    cost = dt * (sl.import_kw * mk.buy_price[t] - sl.export_kw * mk.sell_price[t])
    scale = dt * (1.0 - snapshot.pv.uncertainty)
    for i, ev in enumerate(snapshot.fleet):
        eta2 = snapshot.charger_of(ev).eff_conv ** 2
        cost -= scale * eta2 * (sl.reserve_up_kw[i] * mk.regup_price[t]
                                + sl.reserve_down_kw[i] * mk.regdn_price[t])
        cost += dt * snapshot.wear_rate * sl.discharge_kw[i]
        if ev.departure_step == t + 1:
            cost += ev.penalty_rate * (departure_target(ev) - soc_next[ev.id])
    if snapshot.pv_cost:
        cost += dt * snapshot.pv_cost * sum(float(snapshot.pv_available_kw(c)[t])
                                            for c in snapshot.chargers)
    return cost


def run_day(timeline: DayTimeline, config: SolverConfig | None = None) -> MpcTrace:
    """Run the receding-horizon loop over the whole day."""
    config = config or SolverConfig()
    real_snap = timeline.realized_snapshot()
    T, dt = real_snap.horizon_steps, real_snap.step_hours
    fleet = real_snap.fleet
    V, C = len(fleet), len(real_snap.chargers)
    realized = Schedule.zeros(real_snap)
    realized.active = np.zeros((T, V), dtype=int)
    realized.mode = np.ones((T, V), dtype=int)
    realized.draw_mode = np.zeros((T, C), dtype=int)
    soc: dict[str, float] = {}
    records: list[StepRecord] = []
    committed_cost = 0.0
    prev_plan: Schedule | None = None

    for s in range(T):
        for i, ev in enumerate(fleet):
            if ev.arrival_step == s:
                soc[ev.id] = ev.arrival_soc_kwh
            if ev.arrival_step <= s and ev.id in soc:
                realized.soc_kwh[s, i] = soc[ev.id]
        plan_snap, plan_fleet = _plan_snapshot(timeline, s)
        boundary = {ev.id: soc[ev.id] for ev in plan_fleet if ev.arrival_step < s}
        t0 = time.perf_counter()
        model, catalog = build(plan_snap, s, boundary)
        hint = None
        if prev_plan is not None:
            try:
                hint = values_from_schedule(prev_plan, catalog)
            except ValueError:
                hint = None
        sol = solve_milp(model, config, hint=hint)
        record = StepRecord(s, sol.status.value, sol.stats.nodes,
                            sol.gap if sol.has_incumbent else math.inf, 0.0,
                            sol.objective if sol.has_incumbent else math.nan, committed_cost, 0.0)
        if sol.has_incumbent:
            plan = extract_schedule(sol, catalog, plan_snap, config.feasibility_tol)
            committed = _slice_from(plan, real_snap, s)
            prev_plan = plan
        else:
            record.fallback = True
            record.events.append(f"no plan ({sol.status.value}); zero power committed")
            logger.warning("step %d: solver returned %s; committing zero power", s, sol.status.value)
            committed = StepSlice.zeros(s, V, C)
            prev_plan = None
        record.wall_time = time.perf_counter() - t0

        on_site = {ev.id: soc[ev.id] for ev in fleet if ev.present(s)}
        realized_slice, soc_next, events = plant_step(real_snap, committed, on_site,
                                                      float(timeline.pv_multiplier[s]))
        record.events.extend(events)
        soc.update(soc_next)
        _store(realized, realized_slice, s, fleet)
        record.step_cost = _step_cost(real_snap, realized_slice, soc)
        committed_cost += record.step_cost
        records.append(record)
        logger.debug("step %d: %s, plan %.6f, step cost %.6f", s, record.status,
                     record.plan_objective, record.step_cost)

    cost = cost_breakdown(realized, real_snap)
    cost.policy = "MPC"
    return MpcTrace(realized, records, cost, committed_cost, real_snap)


def _store(realized: Schedule, sl: StepSlice, s: int, fleet) -> None:
    realized.charge_kw[s] = sl.charge_kw
    realized.discharge_kw[s] = sl.discharge_kw
    realized.reserve_up_kw[s] = sl.reserve_up_kw
    realized.reserve_down_kw[s] = sl.reserve_down_kw
    realized.pv_kw[s] = sl.pv_kw
    realized.draw_kw[s] = sl.draw_kw
    realized.feed_kw[s] = sl.feed_kw
    realized.import_kw[s] = sl.import_kw
    realized.export_kw[s] = sl.export_kw
    realized.active[s] = (sl.charge_kw > 0) | (sl.discharge_kw > 0) | (sl.reserve_up_kw > 0) | (
        sl.reserve_down_kw > 0)
    realized.mode[s] = sl.discharge_kw <= 0
    realized.draw_mode[s] = sl.draw_kw > 0
