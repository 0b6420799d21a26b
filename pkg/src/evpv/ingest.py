"""CSV loaders for prices, PV traces, fleets, chargers and site limits.

Market files carry one row per price interval (hourly in the wholesale
convention)::

    timestamp,spp_buy,regup,regdn[,spp_sell]

PV files carry per-minute output of a system of known rating::

    timestamp,power_kw

Fleet files use ``id,arrival,departure,demand_kwh,arrival_soc_kwh,
soc_min_kwh,soc_max_kwh,charge_max_kw,discharge_min_kw,eff_charge,
eff_discharge,penalty_rate,charger_id`` with times as ``HH:MM`` or ISO-8601.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
import math
from fractions import Fraction
from pathlib import Path

import numpy as np

from .domain import (ChargerSpec, EvSession, InvalidSessionError, MarketSeries, PvForecast,
                     SiteLimits, session_steps)

logger = logging.getLogger(__name__)

# file units per $/kWh; loading divides so that the conversion is correctly rounded
PRICE_UNITS = {"usd_per_kwh": 1.0, "cents_per_kwh": 100.0, "usd_per_mwh": 1000.0}

FLEET_COLUMNS = ("id", "arrival", "departure", "demand_kwh", "arrival_soc_kwh", "soc_min_kwh",
                 "soc_max_kwh", "charge_max_kw", "discharge_min_kw", "eff_charge",
                 "eff_discharge", "penalty_rate", "charger_id")
CHARGER_COLUMNS = ("id", "pv_rated_kw", "inverter_rated_kw", "ev_port_rated_kw",
                   "dc_converter_count", "connection_count", "eff_conv", "pv_scale")


class DataFormatError(ValueError):
    """Malformed input file; the message names the file and line."""

    def __init__(self, path, line: int | None, message: str):
        self.path, self.line = str(path), line
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")


class FleetValidationError(InvalidSessionError):
    """One or more fleet rows violate the session invariants."""

    def __init__(self, path, errors: list[tuple[int, str]]):
        self.path, self.errors = str(path), errors
        super().__init__("\n".join(f"{path}:{line}: {msg}" for line, msg in errors))


def _read_rows(path, required: tuple[str, ...], allow_empty: bool = False) -> list[tuple[int, dict]]:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataFormatError(path, None, "empty file")
        header = [h.strip() for h in reader.fieldnames]
        missing = [c for c in required if c not in header]
        if missing:
            raise DataFormatError(path, 1, f"missing column(s): {', '.join(missing)}")
        reader.fieldnames = header
        rows = [(reader.line_num, {k: (v or "").strip() for k, v in row.items() if k is not None})
                for row in reader]
    if not rows and not allow_empty:
        raise DataFormatError(path, None, "no data rows")
    return rows


def _number(path, line: int, row: dict, key: str) -> float:
    try:
        value = float(row[key])
    except (TypeError, ValueError):
        raise DataFormatError(path, line, f"{key}={row.get(key)!r} is not a number") from None
    if not math.isfinite(value):
        raise DataFormatError(path, line, f"{key} is not finite")
    return value


def _timestamp(path, line: int, text: str) -> dt.datetime:
    try:
        return dt.datetime.fromisoformat(text)
    except ValueError:
        raise DataFormatError(path, line, f"bad timestamp {text!r}") from None


def _steps_per(interval: dt.timedelta, step_hours: float, path) -> int:
    ratio = Fraction(int(interval.total_seconds())) / (Fraction(step_hours).limit_denominator(10**6) * 3600)
    if ratio.denominator != 1 or ratio < 1:
        raise DataFormatError(path, None, f"interval {interval} is not a whole number of "
                                          f"{step_hours:g} h steps")
    return int(ratio)


# -- market ---------------------------------------------------------------------------

def load_market(path, step_hours: float = 0.25, sell_factor: float = 0.98,
                unit: str = "usd_per_kwh") -> MarketSeries:
    """Expand interval prices onto the step grid by zero-order hold.

    A missing ``spp_sell`` becomes ``buy - (1 - sell_factor) * |buy|``,
    which is ``sell_factor * buy`` for positive prices and keeps the sell
    price below the buy price when prices go negative.
    """
    if unit not in PRICE_UNITS:
        raise ValueError(f"unknown price unit {unit!r}; choose from {sorted(PRICE_UNITS)}")
    per = PRICE_UNITS[unit]
    rows = _read_rows(path, ("timestamp", "spp_buy", "regup", "regdn"))
    stamps, buy, sell, up, dn = [], [], [], [], []
    for line, row in rows:
        stamps.append(_timestamp(path, line, row["timestamp"]))
        b = _number(path, line, row, "spp_buy") / per
        if row.get("spp_sell"):
            s = _number(path, line, row, "spp_sell") / per
            if s > b:
                raise DataFormatError(path, line, f"sell price {s:g} exceeds buy price {b:g}")
        else:
            s = b - (1.0 - sell_factor) * abs(b)
        buy.append(b)
        sell.append(s)
        up.append(_number(path, line, row, "regup") / per)
        dn.append(_number(path, line, row, "regdn") / per)
    interval = _check_cadence(path, rows, stamps, dt.timedelta(hours=1))
    k = _steps_per(interval, step_hours, path)
    hold = lambda v: np.repeat(np.asarray(v, dtype=float), k)  # noqa: E731
    return MarketSeries(hold(buy), hold(sell), hold(up), hold(dn))


def _check_cadence(path, rows, stamps, default: dt.timedelta) -> dt.timedelta:
    if len(stamps) < 2:
        return default
    interval = stamps[1] - stamps[0]
    for (line, _), prev, cur in zip(rows[1:], stamps, stamps[1:]):
        step = cur - prev
        if step <= dt.timedelta(0):
            raise DataFormatError(path, line, f"timestamp {cur.isoformat()} not after {prev.isoformat()}")
        if step != interval:
            raise DataFormatError(path, line, f"gap in timestamps: {prev.isoformat()} -> "
                                              f"{cur.isoformat()} (expected every {interval})")
    return interval


def write_market(path, market: MarketSeries, start: dt.datetime, step_hours: float = 0.25,
                 interval_hours: float = 1.0, unit: str = "usd_per_kwh",
                 include_sell: bool = False) -> None:
    """Write a market series back out at its interval resolution."""
    per = PRICE_UNITS[unit]
    k = _steps_per(dt.timedelta(hours=interval_hours), step_hours, path)
    header = ["timestamp", "spp_buy", "regup", "regdn"] + (["spp_sell"] if include_sell else [])
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for j, t in enumerate(range(0, len(market), k)):
            stamp = start + dt.timedelta(hours=interval_hours * j)
            values = [market.buy_price[t], market.regup_price[t], market.regdn_price[t]]
            if include_sell:
                values.append(market.sell_price[t])
            writer.writerow([stamp.isoformat(timespec="minutes")] + [_price_text(v, per) for v in values])


def _price_text(value: float, per: float) -> str:
    """Shortest decimal in file units that loads back to exactly ``value``."""
    value = float(value)
    if per == 1.0:
        return repr(value)
    for digits in range(1, 18):
        text = repr(float(f"{value * per:.{digits}g}"))
        if float(text) / per == value:
            return text
    raise ValueError(f"price {value!r} has no exact representation in file units")


# -- PV -------------------------------------------------------------------------------

def load_pv(path, rated_kwp: float, step_hours: float = 0.25, uncertainty: float = 0.10,
            horizon_steps: int | None = None) -> PvForecast:
    """Normalize a per-minute PV trace to kW per kWp and average per step.

    Steps are counted from midnight of the first sample's date. Buckets with
    missing samples average what is there and log a warning.
    """
    if not rated_kwp > 0:
        raise ValueError("rated_kwp must be positive")
    rows = _read_rows(path, ("timestamp", "power_kw"))
    T = horizon_steps or round(24 / step_hours)
    step_sec = Fraction(step_hours).limit_denominator(10**6) * 3600
    per_bucket = step_sec / 60
    day0 = None
    sums = np.zeros(T)
    counts = np.zeros(T, dtype=int)
    for line, row in rows:
        stamp = _timestamp(path, line, row["timestamp"])
        power = _number(path, line, row, "power_kw")
        if power < 0:
            raise DataFormatError(path, line, f"negative PV power {power:g} kW")
        if day0 is None:
            day0 = dt.datetime.combine(stamp.date(), dt.time(0), stamp.tzinfo)
        offset = Fraction(int((stamp - day0).total_seconds()))
        bucket = math.floor(offset / step_sec)
        if not 0 <= bucket < T:
            raise DataFormatError(path, line, f"timestamp {row['timestamp']} outside the day")
        sums[bucket] += power
        counts[bucket] += 1
    short = np.flatnonzero(counts < per_bucket)
    if short.size:
        logger.warning("%s: %d step(s) with missing PV samples (first at step %d); averaging the "
                       "samples present", path, short.size, short[0])
    means = np.divide(sums, counts, out=np.zeros(T), where=counts > 0)
    return PvForecast(means / rated_kwp, uncertainty)


# -- fleet, chargers, limits ------------------------------------------------------------

def load_fleet(path, step_hours: float = 0.25) -> list[EvSession]:
    """Read EV sessions; every invalid row is reported, not just the first."""
    rows = _read_rows(path, FLEET_COLUMNS, allow_empty=True)
    fleet, errors, seen = [], [], set()
    for line, row in rows:
        try:
            arrival, departure = session_steps(row["arrival"], row["departure"], step_hours)
            nums = {k: _number(path, line, row, k) for k in FLEET_COLUMNS[3:12]}
            if row["id"] in seen:
                raise InvalidSessionError(f"duplicate EV id {row['id']!r}")
            fleet.append(EvSession(id=row["id"], arrival_step=arrival, departure_step=departure,
                                   charger_id=row["charger_id"], **nums))
            seen.add(row["id"])
        except DataFormatError:
            raise
        except ValueError as exc:  # includes InvalidSessionError and bad time strings
            errors.append((line, str(exc)))
    if errors:
        raise FleetValidationError(path, errors)
    return fleet


def load_chargers(path) -> list[ChargerSpec]:
    rows = _read_rows(path, CHARGER_COLUMNS[:4])
    chargers = []
    for line, row in rows:
        kwargs = {"id": row["id"]}
        for key in CHARGER_COLUMNS[1:]:
            if row.get(key):
                value = _number(path, line, row, key)
                kwargs[key] = int(value) if key.endswith("_count") else value
        try:
            chargers.append(ChargerSpec(**kwargs))
        except ValueError as exc:
            raise FleetValidationError(path, [(line, f"charger {row['id']}: {exc}")]) from None
    return chargers


def load_limits(path, horizon_steps: int) -> SiteLimits:
    """Network caps: one row (constant for the day) or one row per step."""
    rows = _read_rows(path, ("import_cap_kw", "export_cap_kw"))
    imp = [_number(path, line, row, "import_cap_kw") for line, row in rows]
    exp = [_number(path, line, row, "export_cap_kw") for line, row in rows]
    if len(rows) == 1:
        return SiteLimits.constant(horizon_steps, imp[0], exp[0])
    if len(rows) != horizon_steps:
        raise DataFormatError(path, None, f"{len(rows)} rows; expected 1 or {horizon_steps}")
    return SiteLimits(np.array(imp), np.array(exp))


def write_fleet(path, fleet, step_hours: float = 0.25) -> None:
    """Write sessions in the fleet CSV format, times as ``HH:MM``."""
    def clock(step: int) -> str:
        minutes = round(step * step_hours * 60)
        return f"{minutes // 60:02d}:{minutes % 60:02d}"

    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FLEET_COLUMNS)
        for ev in fleet:
            writer.writerow([ev.id, clock(ev.arrival_step), clock(ev.departure_step)]
                            + [repr(float(getattr(ev, k))) for k in FLEET_COLUMNS[3:12]]
                            + [ev.charger_id])


def write_chargers(path, chargers) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CHARGER_COLUMNS)
        for c in chargers:
            writer.writerow([getattr(c, k) for k in CHARGER_COLUMNS])
