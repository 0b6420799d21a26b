"""Seeded synthetic market and PV days in the raw file formats.

The shapes are loosely modelled on a Texas summer day: cheap night energy,
an afternoon price peak, regulation capacity around a third of the energy
price, and a clear-sky PV bell with passing clouds.
"""

from __future__ import annotations

import csv
import datetime as dt
from pathlib import Path

import numpy as np


def market_day(seed: int = 0, date: dt.date = dt.date(2014, 7, 1), spike: float = 0.0) -> list[dict]:
    """24 hourly rows with prices in $/MWh (ERCOT file convention)."""
    rng = np.random.default_rng(seed)
    hours = np.arange(24)
    base = 22 + 6 * np.sin((hours - 9) / 24 * 2 * np.pi) + 18 * np.exp(-((hours - 16.5) / 2.2) ** 2)
    base += spike * np.exp(-((hours - 17) / 1.0) ** 2)
    spp = base * (1 + 0.08 * rng.standard_normal(24))
    regup = 0.35 * base * (1 + 0.25 * rng.standard_normal(24))
    regdn = 0.28 * base * (1 + 0.25 * rng.standard_normal(24))
    start = dt.datetime.combine(date, dt.time(0))
    rows = []
    for h in hours:
        rows.append({
            "timestamp": (start + dt.timedelta(hours=int(h))).isoformat(timespec="minutes"),
            "spp_buy": round(float(spp[h]), 2),
            "regup": round(float(max(regup[h], 1.0)), 2),
            "regdn": round(float(max(regdn[h], 1.0)), 2),
        })
    return rows


def pv_day(seed: int = 0, date: dt.date = dt.date(2014, 7, 1), rated_kwp: float = 11.1,
           cloudiness: float = 0.3) -> list[dict]:
    """1440 per-minute rows of PV output (kW) for a ``rated_kwp`` system."""
    rng = np.random.default_rng(seed + 1000)
    minutes = np.arange(24 * 60)
    h = minutes / 60.0
    sunrise, sunset = 6.5, 20.5
    phase = np.clip((h - sunrise) / (sunset - sunrise), 0.0, 1.0)
    clear = 0.82 * np.sin(np.pi * phase) ** 1.3
    # clouds: smoothed random dips
    noise = rng.standard_normal(minutes.size)
    kernel = np.exp(-np.linspace(-3, 3, 61) ** 2)
    smooth = np.convolve(noise, kernel / kernel.sum(), mode="same")
    dips = np.clip(1 - cloudiness * np.maximum(smooth * 3, 0), 0.15, 1.0)
    power = np.round(rated_kwp * clear * dips, 4)
    start = dt.datetime.combine(date, dt.time(0))
    return [{"timestamp": (start + dt.timedelta(minutes=int(m))).isoformat(timespec="minutes"),
             "power_kw": float(max(p, 0.0))} for m, p in zip(minutes, power)]


def write_rows(path: Path, rows: list[dict]) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def tiny_snapshot(rng: np.random.Generator, max_binaries: int = 16):
    """A random single-charger instance small enough for exhaustive search.

    The horizon is capped so that the model has at most ``max_binaries``
    binaries before any presolve fixing.
    """
    from .domain import ChargerSpec, EvSession, MarketSeries, PvForecast, SiteLimits, scenario

    V = int(rng.integers(1, 3))
    t_max = max(2, max_binaries // (2 * V + 1))
    T = int(rng.integers(2, min(4, t_max) + 1))
    charger = ChargerSpec("c", pv_rated_kw=float(rng.choice([0.0, 5.0, 10.0])),
                          inverter_rated_kw=10.0, ev_port_rated_kw=10.0, dc_converter_count=1,
                          connection_count=2, eff_conv=0.96)
    fleet = []
    for v in range(V):
        a = int(rng.integers(0, T - 1))
        d = int(rng.integers(a + 1, T))
        soc_max = float(rng.choice([24.0, 60.0]))
        soc_a = float(rng.uniform(5.0, 0.5 * soc_max))
        fleet.append(EvSession(
            id=str(v + 1), arrival_step=a, departure_step=d,
            demand_kwh=float(rng.uniform(0.0, min(6.0, soc_max - soc_a))),
            arrival_soc_kwh=soc_a, soc_min_kwh=5.0, soc_max_kwh=soc_max,
            charge_max_kw=float(rng.choice([7.0, 50.0])),
            discharge_min_kw=float(rng.choice([0.0, -10.0])), eff_charge=0.95,
            eff_discharge=0.95, penalty_rate=1.0, charger_id="c"))
    buy = rng.uniform(-0.01, 0.08, T)
    market = MarketSeries(buy, buy - 0.02 * np.abs(buy), rng.uniform(0, 0.03, T),
                          rng.uniform(0, 0.03, T))
    pv = PvForecast(rng.uniform(0, 1, T), 0.1)
    limits = SiteLimits(rng.choice([5.0, 40.0], T), rng.choice([5.0, 40.0], T))
    return scenario(fleet, [charger], market, pv, limits, 0.25,
                    reserves_enabled=bool(rng.integers(0, 2)),
                    reserve_bound_convention=str(rng.choice(["as_printed", "swapped"])))


def write_day(directory: Path, seed: int, date: dt.date, rated_kwp: float = 11.1) -> None:
    """Market ($/kWh) and PV files for one synthetic day."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = market_day(seed, date)
    for row in rows:
        for key in ("spp_buy", "regup", "regdn"):
            row[key] = round(row[key] / 1000, 6)
    write_rows(directory / "market.csv", rows)
    write_rows(directory / "pv.csv", pv_day(seed, date, rated_kwp))
