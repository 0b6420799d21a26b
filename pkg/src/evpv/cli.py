"""Command-line front end.

Every flag can also be set through an environment variable named
``EVPV_`` plus the flag in upper case with dashes as underscores, e.g.
``EVPV_TIME_LIMIT=120`` or ``EVPV_NO_V2G=1``. Flags on the command line win.

Exit codes: 0 success, 1 validation failure, 2 I/O or parse error,
3 solver limit reached, 4 infeasible.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (average_rate, baseline_cost, converter_conflicts, immediate,
                        percent_reduction, profile_as_point)
from .domain import (InvalidScenarioError, InvalidSessionError, ReserveBoundConvention, ReserveMode,
                     ScenarioSnapshot, SiteLimits, accepted_fleet, check_acceptance)
from .formulation import AuditError, build, cost_breakdown, extract_schedule
from .ingest import DataFormatError, load_chargers, load_fleet, load_limits, load_market, load_pv
from .milp import SolverConfig, Status, enumerate_oracle, solve_milp
from .mpc import DayTimeline, load_overlay, run_day
from .synthetic import tiny_snapshot

logger = logging.getLogger("evpv")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_LIMIT, EXIT_INFEASIBLE = 0, 1, 2, 3, 4
ENV_PREFIX = "EVPV_"


def data_dir() -> Path:
    return Path(str(resources.files("evpv") / "data"))


@dataclass
class RunConfig:
    """Everything a command needs; toggles map one-to-one onto the snapshot."""

    market: Path
    pv: Path
    fleet: Path
    chargers: Path
    limits: Path | None
    pv_kwp: float = 11.1
    price_unit: str = "usd_per_kwh"
    dt_minutes: int = 15
    sell_factor: float = 0.98
    pv_uncertainty: float = 0.10
    v2g: bool = True
    reserves: bool = True
    curtailment: bool = True
    symmetric_reserves: bool = False
    reserve_bounds: str = "printed"
    gap: float = 1.5e-4
    time_limit: float = 600.0
    seed: int = 0
    out: Path = Path("out")

    @property
    def step_hours(self) -> float:
        return self.dt_minutes / 60.0

    def solver(self) -> SolverConfig:
        return SolverConfig(rel_gap_tol=self.gap, time_limit=self.time_limit)

    def snapshot_options(self) -> dict:
        return dict(
            v2g_enabled=self.v2g, reserves_enabled=self.reserves,
            curtailment_enabled=self.curtailment,
            reserve_mode=ReserveMode.SYMMETRIC if self.symmetric_reserves else ReserveMode.ASYMMETRIC,
            reserve_bound_convention=(ReserveBoundConvention.SWAPPED if self.reserve_bounds == "swapped"
                                      else ReserveBoundConvention.AS_PRINTED))


def load_snapshot(cfg: RunConfig, market: Path | None = None, pv: Path | None = None) -> ScenarioSnapshot:
    """Read all input files into one snapshot (not yet admission-checked)."""
    dth = cfg.step_hours
    mk = load_market(market or cfg.market, dth, cfg.sell_factor, cfg.price_unit)
    T = len(mk)
    fc = load_pv(pv or cfg.pv, cfg.pv_kwp, dth, cfg.pv_uncertainty, horizon_steps=T)
    fleet = load_fleet(cfg.fleet, dth)
    chargers = load_chargers(cfg.chargers)
    limits = load_limits(cfg.limits, T) if cfg.limits else None
    return ScenarioSnapshot(tuple(fleet), tuple(chargers), mk, fc, limits or SiteLimits.constant(T),
                            step_hours=dth, horizon_steps=T, **cfg.snapshot_options())


def _admitted(snapshot: ScenarioSnapshot, out=sys.stdout) -> ScenarioSnapshot:
    admitted, verdicts = accepted_fleet(snapshot)
    for v in verdicts:
        if not v.accepted:
            print(f"EV {v.ev_id} rejected ({v.reason}); excluded from the schedule", file=out)
    return admitted


def _status_code(status: Status) -> int:
    if status in (Status.OPTIMAL, Status.GAP_LIMIT):
        return EXIT_OK
    if status in (Status.INFEASIBLE, Status.UNBOUNDED):
        return EXIT_INFEASIBLE
    return EXIT_LIMIT


# -- commands -------------------------------------------------------------------------------

def cmd_validate(cfg: RunConfig) -> int:
    snapshot = load_snapshot(cfg)
    verdicts = check_acceptance(snapshot)
    for v in verdicts:
        print(f"EV {v.ev_id}: {'accepted' if v.accepted else 'rejected'}"
              + (f" ({v.reason})" if v.reason else ""))
    n_ok = sum(v.accepted for v in verdicts)
    print(f"{n_ok} of {len(verdicts)} accepted")
    return EXIT_OK if n_ok == len(verdicts) else EXIT_INVALID


def solve_snapshot(snapshot: ScenarioSnapshot, config: SolverConfig, hints=(), built=None):
    """Build and solve one day; ``hints`` are feasible points to start from."""
    model, catalog = built or build(snapshot)
    best = None
    for values in hints:
        obj = model.objective_value(values)
        if best is None or obj < best[0]:
            best = (obj, values)
    sol = solve_milp(model, config, hint=None if best is None else best[1])
    return model, catalog, sol


def cmd_solve_day(cfg: RunConfig) -> int:
    snapshot = _admitted(load_snapshot(cfg))
    t0 = time.perf_counter()
    model, catalog, sol = solve_snapshot(snapshot, cfg.solver())
    wall = time.perf_counter() - t0
    cfg.out.mkdir(parents=True, exist_ok=True)
    with (cfg.out / "stats.txt").open("w") as fh:
        fh.write(f"status: {sol.status.value}\nobjective_usd: {sol.objective}\n"
                 f"bound_usd: {sol.bound}\nrel_gap: {sol.gap}\nnodes: {sol.stats.nodes}\n"
                 f"lp_solves: {sol.stats.lp_solves}\nwall_time_s: {wall:.3f}\n"
                 f"variables: {model.num_vars}\nbinaries: {model.num_binaries}\n"
                 f"constraints: {model.num_constraints}\n")
    if sol.has_incumbent:
        schedule = extract_schedule(sol, catalog, snapshot)
        with (cfg.out / "schedule.csv").open("w", newline="") as fh:
            schedule.write_csv(fh)
        report = cost_breakdown(schedule, snapshot)
        with (cfg.out / "cost.txt").open("w") as fh:
            report.write_report(fh)
        print(f"total_usd: {report.total_usd:.6f} (status {sol.status.value}, gap {sol.gap:.2e}, "
              f"{sol.stats.nodes} nodes, {wall:.1f} s)")
    else:
        print(f"no schedule: solver status {sol.status.value}")
    return _status_code(sol.status)


@dataclass
class DayComparison:
    day: str
    ar_ev_cost: float
    imm_ev_cost: float
    pv_sales: float
    c_ar: float
    c_imm: float
    c_opt: float
    status: str
    ar_milp: float | None = None  # baseline under the MILP objective, if feasible there
    imm_milp: float | None = None

    @property
    def pct_imm(self) -> float | None:
        return percent_reduction(self.c_ar, self.c_imm)

    @property
    def pct_opt(self) -> float | None:
        return percent_reduction(self.c_ar, self.c_opt)


def compare_day(snapshot: ScenarioSnapshot, config: SolverConfig, label: str) -> DayComparison:
    """AR, IMM and OPT net costs for one admitted day.

    Baselines that happen to satisfy every MILP constraint seed the search,
    so OPT never reports worse than a feasible baseline.
    """
    ar, imm = average_rate(snapshot), immediate(snapshot)
    for prof in (ar, imm):
        conflicts = converter_conflicts(prof, snapshot)
        if conflicts:
            logger.info("%s %s: %d converter-count conflicts (reported, not enforced)", label,
                        prof.policy, len(conflicts))
    r_ar, r_imm = baseline_cost(ar, snapshot), baseline_cost(imm, snapshot)
    model, catalog = build(snapshot)
    points = [profile_as_point(p, snapshot, model, catalog) for p in (ar, imm)]
    hints = [p.values for p in points if p.feasible]
    _, catalog, sol = solve_snapshot(snapshot, config, hints, (model, catalog))
    c_opt = sol.objective if sol.has_incumbent else math.nan
    ar_milp, imm_milp = (p.objective if p.feasible else None for p in points)
    return DayComparison(label, r_ar.ev_cost_usd, r_imm.ev_cost_usd, r_ar.pv_sales_usd,
                         r_ar.net_usd, r_imm.net_usd, c_opt, sol.status.value, ar_milp, imm_milp)


def _fmt_opt(v: float | None) -> str:
    return "infeasible" if v is None else f"{v:.6f}"


def _fmt_pct(p: float | None) -> str:
    if p is None:
        return "undefined"
    return f"{0.0 if abs(p) < 0.005 else p:.2f}"


def write_comparison(rows: list[DayComparison], out_dir: Path, stream=sys.stdout) -> None:
    """Per-day CSV plus a mean/SD summary over all days."""
    out_dir.mkdir(parents=True, exist_ok=True)
    cols = ["day", "ar_ev_cost_usd", "imm_ev_cost_usd", "pv_sales_usd", "c_ar_usd", "c_imm_usd",
            "c_opt_usd", "pct_imm", "pct_opt", "status", "ar_milp_usd", "imm_milp_usd"]
    with (out_dir / "compare.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r.day, f"{r.ar_ev_cost:.6f}", f"{r.imm_ev_cost:.6f}", f"{r.pv_sales:.6f}",
                        f"{r.c_ar:.6f}", f"{r.c_imm:.6f}", f"{r.c_opt:.6f}", _fmt_pct(r.pct_imm),
                        _fmt_pct(r.pct_opt), r.status, _fmt_opt(r.ar_milp), _fmt_opt(r.imm_milp)])
    summary = table_ii_summary(rows)
    (out_dir / "summary.txt").write_text(summary)
    stream.write(summary)


def _mean_sd(values) -> tuple[float, float]:
    values = [v for v in values if v is not None and not math.isnan(v)]
    if not values:
        return math.nan, math.nan
    sd = statistics.stdev(values) if len(values) > 1 else 0.0
    return statistics.fmean(values), sd


def table_ii_summary(rows: list[DayComparison]) -> str:
    """Charging costs, PV sales and net costs: mean and SD over days."""
    lines = [f"days: {len(rows)}", f"{'quantity':<22}{'mean':>12}{'sd':>12}"]
    fields = [("C_ev AR ($)", [r.ar_ev_cost for r in rows]),
              ("C_ev IMM ($)", [r.imm_ev_cost for r in rows]),
              ("S_PV ($)", [r.pv_sales for r in rows]),
              ("C_ar ($)", [r.c_ar for r in rows]),
              ("C_imm ($)", [r.c_imm for r in rows]),
              ("C_opt ($)", [r.c_opt for r in rows]),
              ("C%_imm (%)", [r.pct_imm for r in rows]),
              ("C%_opt (%)", [r.pct_opt for r in rows])]
    for name, vals in fields:
        mean, sd = _mean_sd(vals)
        lines.append(f"{name:<22}{mean:>12.4f}{sd:>12.4f}")
    mean_ar, mean_imm, mean_opt = (_mean_sd([getattr(r, k) for r in rows])[0]
                                   for k in ("c_ar", "c_imm", "c_opt"))
    lines.append(f"reduction of mean costs: IMM {_fmt_pct(percent_reduction(mean_ar, mean_imm))} %, "
                 f"OPT {_fmt_pct(percent_reduction(mean_ar, mean_opt))} %")
    return "\n".join(lines) + "\n"


def cmd_compare(cfg: RunConfig) -> int:
    snapshot = _admitted(load_snapshot(cfg))
    row = compare_day(snapshot, cfg.solver(), Path(cfg.market).parent.name or "day")
    write_comparison([row], cfg.out)
    return _status_code(Status(row.status))


def cmd_mpc(cfg: RunConfig, overlay: Path | None = None) -> int:
    snapshot = _admitted(load_snapshot(cfg))
    timeline = load_overlay(overlay, snapshot) if overlay else DayTimeline(snapshot)
    trace = run_day(timeline, cfg.solver())
    cfg.out.mkdir(parents=True, exist_ok=True)
    with (cfg.out / "trace.csv").open("w", newline="") as fh:
        trace.realized.write_csv(fh)
    with (cfg.out / "steps.csv").open("w", newline="") as fh:
        trace.write_steps_csv(fh)
    with (cfg.out / "summary.txt").open("w") as fh:
        trace.write_summary(fh)
    print(f"total_usd: {trace.cost.total_usd:.6f} ({len(trace.flagged_steps)} fallback steps)")
    return EXIT_LIMIT if trace.flagged_steps else EXIT_OK


def find_days(root: Path, start: str | None = None, end: str | None = None) -> list[Path]:
    """Day directories (each holding market.csv and pv.csv), sorted by name."""
    days = sorted(p for p in Path(root).iterdir()
                  if p.is_dir() and (p / "market.csv").exists() and (p / "pv.csv").exists())
    if start:
        days = [d for d in days if d.name >= start]
    if end:
        days = [d for d in days if d.name <= end]
    return days


def _sweep_one(args) -> DayComparison:
    cfg, day = args
    snapshot = accepted_fleet(load_snapshot(cfg, day / "market.csv", day / "pv.csv"))[0]
    return compare_day(snapshot, cfg.solver(), day.name)


def cmd_sweep(cfg: RunConfig, days_dir: Path, start=None, end=None, jobs: int = 1) -> int:
    days = find_days(days_dir, start, end)
    if not days:
        raise FileNotFoundError(f"no day directories under {days_dir}")
    work = [(cfg, d) for d in days]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            rows = list(pool.map(_sweep_one, work))
    else:
        rows = [_sweep_one(w) for w in work]
    write_comparison(rows, cfg.out)
    codes = [_status_code(Status(r.status)) for r in rows]
    return max(codes)


def oracle_check(instances: int, seed: int, tol: float = 1e-6, stream=None) -> list[tuple[int, float, float]]:
    """Solve seeded tiny instances by B&B and by enumeration; list mismatches."""
    rng = np.random.default_rng(seed)
    config = SolverConfig(rel_gap_tol=1e-9)
    failures = []
    for k in range(instances):
        model, _ = build(tiny_snapshot(rng))
        a = solve_milp(model, config)
        b = enumerate_oracle(model)
        solved = a.status in (Status.OPTIMAL, Status.GAP_LIMIT)
        if solved != (b.status is Status.OPTIMAL):
            ok = False
        elif solved:
            ok = abs(a.objective - b.objective) <= tol * max(1.0, abs(b.objective))
        else:
            ok = True
        if stream is not None:
            stream.write(f"instance {k}: {'ok' if ok else 'MISMATCH'} bnb={a.objective} "
                         f"oracle={b.objective}\n")
        if not ok:
            failures.append((k, a.objective, b.objective))
    return failures


def cmd_oracle_check(cfg: RunConfig, instances: int) -> int:
    failures = oracle_check(instances, cfg.seed, stream=sys.stdout)
    print(f"{instances - len(failures)} of {instances} instances agree")
    return EXIT_OK if not failures else EXIT_INVALID


# -- argument parsing ----------------------------------------------------------------------

def _env(name: str, default, cast=str):
    raw = os.environ.get(ENV_PREFIX + name.upper().replace("-", "_"))
    if raw is None:
        return default
    if cast is bool:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    return cast(raw)


def build_parser() -> argparse.ArgumentParser:
    bundled = data_dir()
    first_day = bundled / "days" / "2014-07-01"
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("inputs")
    g.add_argument("--market", type=Path, default=_env("market", first_day / "market.csv", Path))
    g.add_argument("--pv", type=Path, default=_env("pv", first_day / "pv.csv", Path))
    g.add_argument("--fleet", type=Path, default=_env("fleet", bundled / "fleet_table1.csv", Path))
    g.add_argument("--chargers", type=Path,
                   default=_env("chargers", bundled / "chargers_table1.csv", Path))
    g.add_argument("--limits", type=Path, default=_env("limits", bundled / "limits.csv", Path))
    g.add_argument("--pv-kwp", type=float, default=_env("pv-kwp", 11.1, float),
                   help="rated kWp of the system that produced the PV trace")
    g.add_argument("--price-unit", choices=("usd_per_kwh", "cents_per_kwh", "usd_per_mwh"),
                   default=_env("price-unit", "usd_per_kwh"))
    g.add_argument("--dt-minutes", type=int, default=_env("dt-minutes", 15, int))
    g.add_argument("--sell-factor", type=float, default=_env("sell-factor", 0.98, float))
    g.add_argument("--pv-uncertainty", type=float, default=_env("pv-uncertainty", 0.10, float))
    m = common.add_argument_group("model")
    m.add_argument("--no-v2g", action="store_true", default=_env("no-v2g", False, bool))
    m.add_argument("--no-reserves", action="store_true", default=_env("no-reserves", False, bool))
    m.add_argument("--no-curtailment", action="store_true",
                   default=_env("no-curtailment", False, bool))
    m.add_argument("--symmetric-reserves", action="store_true",
                   default=_env("symmetric-reserves", False, bool))
    m.add_argument("--reserve-bounds", choices=("printed", "swapped"),
                   default=_env("reserve-bounds", "printed"))
    s = common.add_argument_group("solver and output")
    s.add_argument("--gap", type=float, default=_env("gap", 1.5e-4, float),
                   help="relative MILP gap tolerance")
    s.add_argument("--time-limit", type=float, default=_env("time-limit", 600.0, float),
                   help="seconds per MILP solve")
    s.add_argument("--seed", type=int, default=_env("seed", 0, int))
    s.add_argument("--out", type=Path, default=_env("out", Path("out"), Path))
    s.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="evpv", description="EV-PV car park scheduling.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("validate", parents=[common], help="admission check of a bundle")
    sub.add_parser("solve-day", parents=[common], help="single day-ahead MILP solve")
    sub.add_parser("compare", parents=[common], help="AR vs IMM vs OPT on one day")
    p = sub.add_parser("mpc", parents=[common], help="receding-horizon run over one day")
    p.add_argument("--overlay", type=Path, default=_env("overlay", None, Path),
                   help="realization overlay CSV (step,entity,field,value)")
    p = sub.add_parser("sweep", parents=[common], help="compare over many days")
    p.add_argument("--days-dir", type=Path, default=_env("days-dir", bundled / "days", Path))
    p.add_argument("--start", default=_env("start", None), help="first day directory name")
    p.add_argument("--end", default=_env("end", None), help="last day directory name")
    p.add_argument("--jobs", type=int, default=_env("jobs", 1, int))
    p = sub.add_parser("oracle-check", parents=[common], help="B&B vs exhaustive enumeration")
    p.add_argument("--instances", type=int, default=_env("instances", 100, int))
    return parser


def config_from_args(args) -> RunConfig:
    return RunConfig(
        market=args.market, pv=args.pv, fleet=args.fleet, chargers=args.chargers,
        limits=args.limits if args.limits and Path(args.limits).name else None,
        pv_kwp=args.pv_kwp, price_unit=args.price_unit, dt_minutes=args.dt_minutes,
        sell_factor=args.sell_factor, pv_uncertainty=args.pv_uncertainty, v2g=not args.no_v2g,
        reserves=not args.no_reserves, curtailment=not args.no_curtailment,
        symmetric_reserves=args.symmetric_reserves, reserve_bounds=args.reserve_bounds,
        gap=args.gap, time_limit=args.time_limit, seed=args.seed, out=args.out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    cfg = config_from_args(args)
    try:
        if args.command == "validate":
            return cmd_validate(cfg)
        if args.command == "solve-day":
            return cmd_solve_day(cfg)
        if args.command == "compare":
            return cmd_compare(cfg)
        if args.command == "mpc":
            return cmd_mpc(cfg, args.overlay)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.days_dir, args.start, args.end, args.jobs)
        return cmd_oracle_check(cfg, args.instances)
    except (OSError, DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InvalidSessionError, InvalidScenarioError, AuditError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
