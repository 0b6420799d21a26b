"""Immediate (IMM) and average-rate (AR) charging, and their net cost."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .domain import ScenarioSnapshot
from .formulation import CostReport, Schedule, build, values_from_schedule
from .milp import audit


@dataclass
class BaselineProfile:
    """Per-step, per-EV charging power (kW) for a policy without an EMS."""

    policy: str
    ev_ids: tuple[str, ...]
    charge_kw: np.ndarray  # (T, V)
    truncated: tuple[str, ...] = ()  # EVs whose demand could not be met

    def park_power_kw(self) -> np.ndarray:
        return self.charge_kw.sum(axis=1)

    def delivered_kwh(self, step_hours: float) -> np.ndarray:
        return self.charge_kw.sum(axis=0) * step_hours


def _port_limit(snapshot: ScenarioSnapshot, ev) -> float:
    return min(snapshot.charger_of(ev).ev_port_rated_kw, ev.charge_max_kw)


def average_rate(snapshot: ScenarioSnapshot) -> BaselineProfile:
    """Constant power ``d / parking time``, capped by the EV and its port."""
    T, dt = snapshot.horizon_steps, snapshot.step_hours
    power = np.zeros((T, len(snapshot.fleet)))
    short = []
    for i, ev in enumerate(snapshot.fleet):
        hours = (ev.departure_step - ev.arrival_step) * dt
        rate = min(ev.demand_kwh / hours, _port_limit(snapshot, ev))
        if rate * hours < ev.demand_kwh - 1e-9:
            short.append(ev.id)
        power[ev.arrival_step:ev.departure_step, i] = rate
    return BaselineProfile("AR", tuple(ev.id for ev in snapshot.fleet), power, tuple(short))


def immediate(snapshot: ScenarioSnapshot) -> BaselineProfile:
    """Full port power from arrival until the demand is delivered.

    The last charging step may run at partial power so the delivered energy
    equals the demand exactly; EVs that leave first are listed in
    ``truncated``.
    """
    T, dt = snapshot.horizon_steps, snapshot.step_hours
    power = np.zeros((T, len(snapshot.fleet)))
    short = []
    for i, ev in enumerate(snapshot.fleet):
        rate = _port_limit(snapshot, ev)
        remaining = ev.demand_kwh
        done = 1e-12 * ev.demand_kwh
        for t in range(ev.arrival_step, ev.departure_step):
            if remaining <= done:
                break
            p = min(rate, remaining / dt)
            power[t, i] = p
            remaining -= p * dt
        if remaining > max(done, 1e-9):
            short.append(ev.id)
    return BaselineProfile("IMM", tuple(ev.id for ev in snapshot.fleet), power, tuple(short))


def baseline_cost(profile: BaselineProfile, snapshot: ScenarioSnapshot) -> CostReport:
    """Net cost of a baseline: EV energy bought minus PV sold.

    Both terms carry the squared converter efficiency as a multiplier,
    matching the reference accounting used for the comparison tables.
    """
    dt, mk = snapshot.step_hours, snapshot.market
    eta2 = np.array([snapshot.charger_of(ev).eff_conv ** 2 for ev in snapshot.fleet])
    ev_cost = dt * math.fsum((profile.charge_kw * eta2[None, :] * mk.buy_price[:, None]).ravel())
    pv_sold = 0.0
    pv_contract = 0.0
    for c in snapshot.chargers:
        energy = c.eff_conv ** 2 * snapshot.pv_available_kw(c)
        pv_sold += dt * math.fsum(energy * mk.sell_price)
        pv_contract += dt * math.fsum(energy * snapshot.pv_cost)
    pv_sales = pv_sold - pv_contract
    net = ev_cost - pv_sales
    return CostReport(energy_trade_usd=ev_cost - pv_sold, pv_cost_usd=pv_contract, total_usd=net,
                      ev_cost_usd=ev_cost, pv_sales_usd=pv_sales, net_usd=net,
                      policy=profile.policy)


def percent_reduction(c_ar: float, c_other: float) -> float | None:
    """``100 * (c_ar - c_other) / c_ar``; ``None`` when the reference is zero."""
    if c_ar == 0:
        return None
    return 100.0 * (c_ar - c_other) / c_ar


def converter_conflicts(profile: BaselineProfile, snapshot: ScenarioSnapshot) -> list[tuple[int, str, int]]:
    """Steps where more EVs charge on a charger than it has DC converters."""
    conflicts = []
    for c in snapshot.chargers:
        cols = [i for i, ev in enumerate(snapshot.fleet) if ev.charger_id == c.id]
        if not cols:
            continue
        busy = (profile.charge_kw[:, cols] > 0).sum(axis=1)
        for t in np.flatnonzero(busy > c.dc_converter_count):
            conflicts.append((int(t), c.id, int(busy[t])))
    return conflicts


def profile_schedule(profile: BaselineProfile, snapshot: ScenarioSnapshot) -> Schedule:
    """Complete a charging profile into a full dispatch.

    PV runs at its MPPT point, each charger's grid exchange closes its DC
    balance, and SOC follows the battery efficiency. No discharge, no
    reserves.
    """
    T, dt = snapshot.horizon_steps, snapshot.step_hours
    sched = Schedule.zeros(snapshot)
    V, C = len(snapshot.fleet), len(snapshot.chargers)
    sched.charge_kw[:] = profile.charge_kw
    sched.active = np.zeros((T, V), dtype=int)
    sched.mode = np.ones((T, V), dtype=int)
    sched.draw_mode = np.zeros((T, C), dtype=int)
    for i, ev in enumerate(snapshot.fleet):
        soc = ev.arrival_soc_kwh
        for t in range(ev.arrival_step, T):
            sched.soc_kwh[t, i] = soc
            soc += dt * ev.eff_charge * profile.charge_kw[t, i]
        sched.active[ev.arrival_step:ev.departure_step, i] = (
            profile.charge_kw[ev.arrival_step:ev.departure_step, i] > 0)
    for c_i, c in enumerate(snapshot.chargers):
        cols = [i for i, ev in enumerate(snapshot.fleet) if ev.charger_id == c.id]
        eta = c.eff_conv
        pv = snapshot.pv_available_kw(c)
        sched.pv_kw[:, c_i] = pv
        load = profile.charge_kw[:, cols].sum(axis=1)
        need = load / eta - eta * pv
        sched.draw_kw[:, c_i] = np.where(need > 0, need / eta, 0.0)
        sched.feed_kw[:, c_i] = np.where(need < 0, -need * eta, 0.0)
        sched.draw_mode[:, c_i] = need > 0
    net = sched.draw_kw.sum(axis=1) - sched.feed_kw.sum(axis=1)
    sched.import_kw[:] = np.maximum(net, 0.0)
    sched.export_kw[:] = np.maximum(-net, 0.0)
    return sched


@dataclass
class MilpPoint:
    """A baseline expressed as a point of the scheduling MILP."""

    values: np.ndarray
    objective: float
    violations: list = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return not self.violations


def profile_as_point(profile: BaselineProfile, snapshot: ScenarioSnapshot, model=None,
                     catalog=None) -> MilpPoint:
    """Evaluate a baseline under the MILP's constraints and objective."""
    if model is None or catalog is None:
        model, catalog = build(snapshot)
    values = values_from_schedule(profile_schedule(profile, snapshot), catalog)
    return MilpPoint(values, model.objective_value(values), audit(model, values))
