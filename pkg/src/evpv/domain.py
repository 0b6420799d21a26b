"""Domain types for the EV-PV car park and the admission gate.

Units throughout: power in kW, energy in kWh, prices in $/kWh, time as
integer step indices on a uniform grid of ``step_hours``.
"""

from __future__ import annotations

import datetime as _dt
import enum
import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np


class InvalidSessionError(ValueError):
    """An EV session violates its own invariants."""


class InvalidScenarioError(ValueError):
    """A scenario snapshot is structurally invalid."""


class ReserveMode(str, enum.Enum):
    ASYMMETRIC = "asymmetric"
    SYMMETRIC = "symmetric"


class ReserveBoundConvention(str, enum.Enum):
    """Which power limit caps each reserve direction.

    ``AS_PRINTED`` pairs up-reserve with the charge limit and down-reserve
    with the discharge limit; ``SWAPPED`` uses the physically intuitive
    pairing (up-reserve with discharge, down-reserve with charge).
    """

    AS_PRINTED = "as_printed"
    SWAPPED = "swapped"


def _frozen_array(values, name: str, length: int | None = None) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim != 1:
        raise InvalidScenarioError(f"{name} must be one-dimensional")
    if length is not None and arr.shape[0] != length:
        raise InvalidScenarioError(f"{name} has length {arr.shape[0]}, expected {length}")
    if not np.all(np.isfinite(arr)):
        raise InvalidScenarioError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class EvSession:
    """One vehicle's visit to the car park."""

    id: str
    arrival_step: int
    departure_step: int
    demand_kwh: float
    arrival_soc_kwh: float
    soc_min_kwh: float
    soc_max_kwh: float
    charge_max_kw: float
    discharge_min_kw: float
    eff_charge: float
    eff_discharge: float
    penalty_rate: float
    charger_id: str

    def __post_init__(self):
        problems = []
        if not self.arrival_step < self.departure_step:
            problems.append(
                f"arrival step {self.arrival_step} not before departure step {self.departure_step}")
        if self.arrival_step < 0:
            problems.append("arrival step is negative")
        # arrival below soc_min is left to the admission gate
        if not (0 <= self.soc_min_kwh <= self.soc_max_kwh
                and 0 <= self.arrival_soc_kwh <= self.soc_max_kwh):
            problems.append("SOC bounds must satisfy 0 <= min <= max and 0 <= arrival <= max")
        if self.demand_kwh < 0:
            problems.append("demand is negative")
        if self.arrival_soc_kwh + self.demand_kwh > self.soc_max_kwh + 1e-9:
            problems.append(
                f"arrival SOC + demand = {self.arrival_soc_kwh + self.demand_kwh:g} kWh "
                f"exceeds max SOC {self.soc_max_kwh:g} kWh")
        if not self.charge_max_kw > 0:
            problems.append("charge_max_kw must be > 0")
        if self.discharge_min_kw > 0:
            problems.append("discharge_min_kw must be <= 0")
        for name in ("eff_charge", "eff_discharge"):
            eff = getattr(self, name)
            if not 0 < eff <= 1:
                problems.append(f"{name} must lie in (0, 1]")
        if self.penalty_rate < 0:
            problems.append("penalty_rate is negative")
        if problems:
            raise InvalidSessionError(f"EV {self.id}: " + "; ".join(problems))

    @property
    def v2g_enabled(self) -> bool:
        return self.discharge_min_kw < 0

    def present(self, step: int) -> bool:
        return self.arrival_step <= step < self.departure_step


@dataclass(frozen=True)
class ChargerSpec:
    """One EV-PV charger: PV port, grid inverter and multiplexed EV ports."""

    id: str
    pv_rated_kw: float
    inverter_rated_kw: float
    ev_port_rated_kw: float
    dc_converter_count: int = 1
    connection_count: int = 1
    eff_conv: float = 0.96
    pv_scale: float = 1.0

    def __post_init__(self):
        problems = []
        if self.pv_rated_kw < 0 or self.inverter_rated_kw <= 0 or self.ev_port_rated_kw <= 0:
            problems.append("ratings must be positive")
        if self.pv_rated_kw > self.inverter_rated_kw:
            problems.append(
                f"PV rating {self.pv_rated_kw:g} kW exceeds inverter rating {self.inverter_rated_kw:g} kW")
        if not 1 <= self.dc_converter_count <= self.connection_count:
            problems.append("need 1 <= dc_converter_count <= connection_count")
        if not 0 < self.eff_conv <= 1:
            problems.append("eff_conv must lie in (0, 1]")
        if self.pv_scale < 0:
            problems.append("pv_scale is negative")
        if problems:
            raise InvalidScenarioError(f"charger {self.id}: " + "; ".join(problems))

    @property
    def admission_cap_kw(self) -> float:
        return min(self.dc_converter_count * self.ev_port_rated_kw, self.inverter_rated_kw)


@dataclass(frozen=True, eq=False)
class MarketSeries:
    """Per-step energy and reserve-capacity prices in $/kWh."""

    buy_price: np.ndarray
    sell_price: np.ndarray
    regup_price: np.ndarray
    regdn_price: np.ndarray

    def __post_init__(self):
        n = len(self.buy_price)
        for name in ("buy_price", "sell_price", "regup_price", "regdn_price"):
            object.__setattr__(self, name, _frozen_array(getattr(self, name), name, n))
        bad = np.flatnonzero(self.sell_price > self.buy_price + 1e-12)
        if bad.size:
            raise InvalidScenarioError(
                f"sell price exceeds buy price at step(s) {bad[:5].tolist()}")

    def __len__(self):
        return len(self.buy_price)

    def slice(self, start: int, stop: int | None = None) -> "MarketSeries":
        s = np.s_[start:stop]
        return MarketSeries(self.buy_price[s], self.sell_price[s],
                            self.regup_price[s], self.regdn_price[s])


@dataclass(frozen=True, eq=False)
class PvForecast:
    """Normalized PV forecast (kW per installed kWp) and its uncertainty band."""

    normalized_kw_per_kwp: np.ndarray
    uncertainty: float = 0.10

    def __post_init__(self):
        arr = _frozen_array(self.normalized_kw_per_kwp, "normalized_kw_per_kwp")
        if np.any(arr < 0):
            raise InvalidScenarioError("PV forecast contains negative values")
        if not 0 <= self.uncertainty < 1:
            raise InvalidScenarioError("PV forecast uncertainty must lie in [0, 1)")
        object.__setattr__(self, "normalized_kw_per_kwp", arr)

    def __len__(self):
        return len(self.normalized_kw_per_kwp)


@dataclass(frozen=True, eq=False)
class SiteLimits:
    """Per-step import/export caps at the park's grid connection."""

    import_cap_kw: np.ndarray
    export_cap_kw: np.ndarray

    def __post_init__(self):
        n = len(self.import_cap_kw)
        imp = _frozen_array(self.import_cap_kw, "import_cap_kw", n)
        exp = _frozen_array(self.export_cap_kw, "export_cap_kw", n)
        if np.any(imp < 0) or np.any(exp < 0):
            raise InvalidScenarioError("site limits must be non-negative")
        object.__setattr__(self, "import_cap_kw", imp)
        object.__setattr__(self, "export_cap_kw", exp)

    @classmethod
    def constant(cls, steps: int, import_kw: float = 40.0, export_kw: float = 40.0) -> "SiteLimits":
        return cls(np.full(steps, float(import_kw)), np.full(steps, float(export_kw)))

    def __len__(self):
        return len(self.import_cap_kw)


@dataclass(frozen=True, eq=False)
class ScenarioSnapshot:
    """A complete, solvable day: fleet, chargers, prices, PV and limits."""

    fleet: tuple[EvSession, ...]
    chargers: tuple[ChargerSpec, ...]
    market: MarketSeries
    pv: PvForecast
    limits: SiteLimits
    step_hours: float = 0.25
    horizon_steps: int = 96
    taper_charge: float = 0.9
    taper_discharge: float = 0.1
    wear_rate: float = 0.042
    pv_cost: float = 0.0
    reserve_mode: ReserveMode = ReserveMode.ASYMMETRIC
    reserve_bound_convention: ReserveBoundConvention = ReserveBoundConvention.AS_PRINTED
    v2g_enabled: bool = True
    reserves_enabled: bool = True
    curtailment_enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "fleet", tuple(self.fleet))
        object.__setattr__(self, "chargers", tuple(self.chargers))
        object.__setattr__(self, "reserve_mode", ReserveMode(self.reserve_mode))
        object.__setattr__(self, "reserve_bound_convention",
                           ReserveBoundConvention(self.reserve_bound_convention))
        self.validate()

    def validate(self) -> None:
        T = self.horizon_steps
        if T <= 0 or self.step_hours <= 0:
            raise InvalidScenarioError("horizon_steps and step_hours must be positive")
        for name, series in (("market", self.market), ("pv", self.pv), ("limits", self.limits)):
            if len(series) != T:
                raise InvalidScenarioError(f"{name} has {len(series)} steps, horizon is {T}")
        if not 0 < self.taper_charge < 1 or not 0 < self.taper_discharge < 1:
            raise InvalidScenarioError("taper thresholds must lie in (0, 1)")
        charger_ids = [c.id for c in self.chargers]
        if len(set(charger_ids)) != len(charger_ids):
            raise InvalidScenarioError("duplicate charger ids")
        ev_ids = [ev.id for ev in self.fleet]
        if len(set(ev_ids)) != len(ev_ids):
            raise InvalidScenarioError("duplicate EV ids")
        chargers = self.charger_map
        for ev in self.fleet:
            if ev.charger_id not in chargers:
                raise InvalidScenarioError(f"EV {ev.id} names unknown charger {ev.charger_id!r}")
            if ev.departure_step >= T:
                raise InvalidScenarioError(
                    f"EV {ev.id} departs at step {ev.departure_step}, outside horizon {T}")
        # physical connections are bounded by the port count, at every step
        for c in self.chargers:
            evs = [ev for ev in self.fleet if ev.charger_id == c.id]
            if len(evs) <= c.connection_count:
                continue
            for t in range(T):
                plugged = sum(ev.present(t) for ev in evs)
                if plugged > c.connection_count:
                    raise InvalidScenarioError(
                        f"charger {c.id} has {plugged} EVs connected at step {t}, "
                        f"only {c.connection_count} connections")

    @property
    def charger_map(self) -> dict[str, ChargerSpec]:
        return {c.id: c for c in self.chargers}

    def charger_of(self, ev: EvSession) -> ChargerSpec:
        return self.charger_map[ev.charger_id]

    def with_fleet(self, fleet: Iterable[EvSession]) -> "ScenarioSnapshot":
        return replace(self, fleet=tuple(fleet))

    def pv_available_kw(self, charger: ChargerSpec) -> np.ndarray:
        """MPPT power available at ``charger`` for each step."""
        return charger.pv_scale * charger.pv_rated_kw * self.pv.normalized_kw_per_kwp


@dataclass(frozen=True)
class Verdict:
    ev_id: str
    accepted: bool
    reason: str | None = None


def departure_target(ev: EvSession) -> float:
    """SOC the user expects at departure (kWh)."""
    return ev.arrival_soc_kwh + ev.demand_kwh


def average_power_kw(ev: EvSession, step_hours: float) -> float:
    """Demand spread evenly over the parking time, in kW."""
    return ev.demand_kwh / ((ev.departure_step - ev.arrival_step) * step_hours)


def check_acceptance(snapshot: ScenarioSnapshot) -> list[Verdict]:
    """Admission gate: per-charger average-rate capacity and minimum arrival SOC.

    EVs arriving below their minimum SOC are rejected outright. Then, per
    charger, while the summed average-rate load exceeds
    ``min(N_ch * P_EVr, P_conv)`` the largest contributor is rejected
    (ties broken by EV id) and the load re-evaluated. The returned verdicts
    follow fleet order.
    """
    verdicts: dict[str, Verdict] = {}
    candidates: list[EvSession] = []
    for ev in snapshot.fleet:
        if ev.soc_min_kwh > ev.arrival_soc_kwh:
            verdicts[ev.id] = Verdict(
                ev.id, False,
                f"arrival_soc: arrival SOC {ev.arrival_soc_kwh:g} kWh below minimum {ev.soc_min_kwh:g} kWh")
        else:
            candidates.append(ev)

    for charger in snapshot.chargers:
        cap = charger.admission_cap_kw
        pool = sorted((ev for ev in candidates if ev.charger_id == charger.id), key=lambda e: e.id)
        loads = {ev.id: average_power_kw(ev, snapshot.step_hours) for ev in pool}
        while pool and math.fsum(loads[ev.id] for ev in pool) > cap + 1e-9:
            total = math.fsum(loads[ev.id] for ev in pool)
            worst = max(pool, key=lambda e: (loads[e.id], _neg_key(e.id)))
            verdicts[worst.id] = Verdict(
                worst.id, False,
                f"charger_load: charger {charger.id} load {total:.4g} kW exceeds {cap:.4g} kW")
            pool.remove(worst)
        for ev in pool:
            verdicts[ev.id] = Verdict(ev.id, True)
    return [verdicts[ev.id] for ev in snapshot.fleet]


def _neg_key(ev_id: str):
    # max() with this key prefers the lexicographically smallest id among equal loads
    return tuple(-ord(ch) for ch in ev_id)


def accepted_fleet(snapshot: ScenarioSnapshot) -> tuple[ScenarioSnapshot, list[Verdict]]:
    """Snapshot restricted to admitted EVs, plus the verdicts."""
    verdicts = check_acceptance(snapshot)
    keep = {v.ev_id for v in verdicts if v.accepted}
    return snapshot.with_fleet(ev for ev in snapshot.fleet if ev.id in keep), verdicts


def _to_seconds(value) -> Fraction:
    if isinstance(value, _dt.datetime):
        value = value.time()
    if isinstance(value, _dt.time):
        return Fraction(value.hour * 3600 + value.minute * 60 + value.second)
    if isinstance(value, _dt.timedelta):
        return Fraction(value.total_seconds()).limit_denominator(10**6)
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return Fraction(value).limit_denominator(10**6) * 3600
    if isinstance(value, str):
        text = value.strip()
        if "T" in text or (len(text) > 8 and "-" in text):
            return _to_seconds(_dt.datetime.fromisoformat(text))
        parts = text.split(":")
        if len(parts) == 1 and text.isdigit() and len(text) in (3, 4):
            parts = [text[:-2], text[-2:]]  # "900" / "0830" style
        if not 2 <= len(parts) <= 3:
            raise ValueError(f"unrecognised time {value!r}")
        hours, minutes = int(parts[0]), int(parts[1])
        seconds = int(parts[2]) if len(parts) == 3 else 0
        if not (0 <= hours <= 24 and 0 <= minutes < 60 and 0 <= seconds < 60):
            raise ValueError(f"time out of range: {value!r}")
        return Fraction(hours * 3600 + minutes * 60 + seconds)
    raise TypeError(f"cannot interpret {value!r} as a time of day")


def to_step_grid(wall_clock_time, step_hours: float, kind: str = "arrival") -> int:
    """Map a time of day onto the step grid.

    Arrivals round up to the next grid point and departures round down, so an
    EV is never scheduled while absent. ``wall_clock_time`` may be a
    ``datetime``/``time``, an ``HH:MM[:SS]`` or ISO-8601 string, or hours as
    a number.
    """
    seconds = _to_seconds(wall_clock_time)
    if seconds < 0 or seconds > 24 * 3600:
        raise ValueError(f"time {wall_clock_time!r} outside the day")
    step = Fraction(step_hours).limit_denominator(10**6) * 3600
    ratio = seconds / step
    if kind == "arrival":
        return math.ceil(ratio)
    if kind == "departure":
        return math.floor(ratio)
    raise ValueError(f"kind must be 'arrival' or 'departure', not {kind!r}")


def session_steps(arrival, departure, step_hours: float) -> tuple[int, int]:
    a = to_step_grid(arrival, step_hours, "arrival")
    d = to_step_grid(departure, step_hours, "departure")
    if d <= a:
        raise InvalidSessionError(
            f"departure {departure!r} rounds to step {d}, not after arrival step {a}")
    return a, d


def scenario(fleet: Sequence[EvSession], chargers: Sequence[ChargerSpec], market: MarketSeries,
             pv: PvForecast, limits: SiteLimits | None = None, step_hours: float = 0.25,
             **options) -> ScenarioSnapshot:
    """Convenience constructor inferring the horizon from the market series."""
    T = len(market)
    if limits is None:
        limits = SiteLimits.constant(T)
    return ScenarioSnapshot(tuple(fleet), tuple(chargers), market, pv, limits,
                            step_hours=step_hours, horizon_steps=T, **options)


TABLE_I_ROWS = (
    # id, arrival, departure, demand, arrival SOC, max SOC, charger
    ("1", "09:00", "17:00", 40.0, 20.0, 85.0, "1"),
    ("2", "08:30", "16:30", 30.0, 20.0, 60.0, "1"),
    ("3", "09:30", "17:30", 10.0, 5.0, 24.0, "2"),
    ("4", "09:00", "17:00", 40.0, 20.0, 85.0, "3"),
    ("5", "08:30", "16:30", 30.0, 20.0, 60.0, "4"),
    ("6", "09:30", "17:30", 10.0, 5.0, 24.0, "4"),
)


@dataclass(frozen=True)
class FleetDefaults:
    """Per-EV constants shared by the whole test fleet."""

    soc_min_kwh: float = 5.0
    charge_max_kw: float = 50.0
    discharge_min_kw: float = -10.0
    eff_charge: float = 0.95
    eff_discharge: float = 0.95
    penalty_rate: float = 1.0


def table_i_fleet(step_hours: float = 0.25, defaults: FleetDefaults | None = None) -> list[EvSession]:
    """The six-vehicle workplace fleet used throughout the examples."""
    defaults = defaults or FleetDefaults()
    fleet = []
    for ev_id, arr, dep, demand, soc_a, soc_max, charger in TABLE_I_ROWS:
        a, d = session_steps(arr, dep, step_hours)
        fleet.append(EvSession(
            id=ev_id, arrival_step=a, departure_step=d, demand_kwh=demand,
            arrival_soc_kwh=soc_a, soc_min_kwh=defaults.soc_min_kwh, soc_max_kwh=soc_max,
            charge_max_kw=defaults.charge_max_kw, discharge_min_kw=defaults.discharge_min_kw,
            eff_charge=defaults.eff_charge, eff_discharge=defaults.eff_discharge,
            penalty_rate=defaults.penalty_rate, charger_id=charger))
    return fleet


def table_i_chargers() -> list[ChargerSpec]:
    """Four 10 kW chargers; 10 kWp PV on chargers 1, 2 and 4."""
    pv = {"1": 10.0, "2": 10.0, "3": 0.0, "4": 10.0}
    return [ChargerSpec(id=cid, pv_rated_kw=kwp, inverter_rated_kw=10.0, ev_port_rated_kw=10.0,
                        dc_converter_count=1, connection_count=2, eff_conv=0.96, pv_scale=1.0)
            for cid, kwp in pv.items()]
