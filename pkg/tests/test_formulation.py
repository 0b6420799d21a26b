import io
import logging

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from evpv.domain import (InvalidScenarioError, MarketSeries, PvForecast, ReserveBoundConvention,
                         ReserveMode, SiteLimits, departure_target, scenario, table_i_chargers,
                         table_i_fleet)
from evpv.formulation import (HorizonExhaustedError, NoIncumbentError, Schedule, build,
                              cost_breakdown, extract_schedule, schedule_from_values,
                              values_from_schedule)
from evpv.milp import MilpSolution, SolverConfig, Status, audit, enumerate_oracle, solve_milp
from evpv.synthetic import tiny_snapshot

from conftest import charger, ev, flat_market, toy_snapshot
from oracles import soc_next, two_step_placement_costs

EXACT = SolverConfig(rel_gap_tol=1e-9)


def solve(snapshot, config=EXACT, from_step=0, soc=None):
    model, catalog = build(snapshot, from_step, soc)
    sol = solve_milp(model, config)
    return model, catalog, sol


# -- build ------------------------------------------------------------------------------------

def test_table_i_variable_counts():
    T = 96
    snap = scenario(table_i_fleet(), table_i_chargers(), flat_market(T), PvForecast(np.zeros(T)))
    model, catalog = build(snap)
    assert catalog.counts() == (5 * 6 * 96 + 3 * 4 * 96 + 2 * 96, 2 * 6 * 96 + 4 * 96)
    assert catalog.counts() == (4224, 1536)
    assert model.num_binaries == 1536
    fam = catalog.families()
    ids = np.concatenate([a.ravel() for a in fam.values()])
    assert len(set(ids.tolist())) == ids.size == model.num_vars


def test_empty_fleet_no_pv_is_zero():
    T = 8
    snap = scenario([], [charger()], flat_market(T), PvForecast(np.zeros(T)))
    model, catalog, sol = solve(snap)
    assert sol.objective == pytest.approx(0.0, abs=1e-12)
    sched = extract_schedule(sol, catalog, snap)
    for name in Schedule.SERIES_CHARGER + Schedule.SERIES_SITE:
        assert not np.any(getattr(sched, name))


def test_toy_places_charging_in_cheap_step():
    snap = toy_snapshot()
    model, catalog, sol = solve(snap)
    sched = extract_schedule(sol, catalog, snap)
    assert sched.charge_kw[0, 0] == pytest.approx(0.0, abs=1e-9)
    assert sched.charge_kw[1, 0] == pytest.approx(10.0)
    costs = two_step_placement_costs([0.10, 0.02], 2.375, 10.0, 0.25, 0.95, 0.96)
    assert int(np.argmin(costs)) == 1
    assert sol.objective == pytest.approx(min(costs))
    assert enumerate_oracle(model).objective == pytest.approx(sol.objective)


def test_horizon_exhausted():
    with pytest.raises(HorizonExhaustedError):
        build(toy_snapshot(), from_step=3)


def test_realized_soc_required_after_arrival():
    with pytest.raises(InvalidScenarioError):
        build(toy_snapshot(), from_step=1)


def test_rebuild_from_realized_soc():
    snap = toy_snapshot()
    model, catalog, sol = solve(snap, from_step=1, soc={"1": 10.0})
    sched = extract_schedule(sol, catalog, snap)
    assert sched.soc_kwh[0, 0] == 10.0
    # the target stays anchored at arrival SOC + demand
    assert sched.soc_kwh[1, 0] == pytest.approx(departure_target(snap.fleet[0]))


def test_symmetric_reserves():
    T = 4
    snap = scenario([ev(a=0, d=3, demand=1.0, x_lb=-10.0, soc_a=30.0)], [charger()],
                    flat_market(T, regup=0.03, regdn=0.01), PvForecast(np.zeros(T)),
                    reserve_mode=ReserveMode.SYMMETRIC,
                    reserve_bound_convention=ReserveBoundConvention.SWAPPED)
    _, catalog, sol = solve(snap)
    sched = extract_schedule(sol, catalog, snap)
    np.testing.assert_allclose(sched.reserve_up_kw, sched.reserve_down_kw, atol=1e-9)
    assert sched.reserve_up_kw.sum() > 0


def test_printed_reserve_bounds_forbid_charging_without_v2g(caplog):
    T = 4
    kwargs = dict(v2g_enabled=False, reserves_enabled=True)
    snap = scenario([ev(a=0, d=3, demand=2.0)], [charger()], flat_market(T), PvForecast(np.zeros(T)),
                    **kwargs)
    with caplog.at_level(logging.WARNING):
        _, catalog, sol = solve(snap)
    assert "cannot charge" in caplog.text
    assert extract_schedule(sol, catalog, snap).charge_kw.sum() == pytest.approx(0.0, abs=1e-9)
    swapped = scenario([ev(a=0, d=3, demand=2.0)], [charger()], flat_market(T),
                       PvForecast(np.zeros(T)), reserve_bound_convention="swapped", **kwargs)
    _, catalog, sol = solve(swapped)
    assert extract_schedule(sol, catalog, swapped).charge_kw.sum() > 0


def test_printed_and_swapped_bounds_differ_as_written():
    """x- + r_up <= x_ub and x+ + r_dn <= -x_lb as printed; swapped exchanges them."""
    T = 3
    fleet = [ev(a=0, d=2, demand=0.0, soc_a=30.0, x_ub=4.0, x_lb=-2.0)]
    market = flat_market(T, regup=0.05, regdn=0.05)
    for convention, up, dn in (("as_printed", 4.0, 2.0), ("swapped", 2.0, 4.0)):
        snap = scenario(fleet, [charger()], market, PvForecast(np.zeros(T)),
                        reserve_bound_convention=convention)
        _, catalog, sol = solve(snap)
        sched = extract_schedule(sol, catalog, snap)
        assert sched.reserve_up_kw[0, 0] == pytest.approx(up)
        assert sched.reserve_down_kw[0, 0] == pytest.approx(dn)


def test_no_curtailment_pins_pv():
    T = 4
    snap = scenario([], [charger(pv=5.0)], flat_market(T, buy=-0.05, factor=1.0),
                    PvForecast(np.full(T, 0.5)), curtailment_enabled=False)
    _, catalog, sol = solve(snap)
    np.testing.assert_allclose(extract_schedule(sol, catalog, snap).pv_kw, 2.5)
    free = scenario([], [charger(pv=5.0)], flat_market(T, buy=-0.05, factor=1.0),
                    PvForecast(np.full(T, 0.5)))
    _, catalog, sol = solve(free)
    np.testing.assert_allclose(extract_schedule(sol, catalog, free).pv_kw, 0.0, atol=1e-9)


# -- extract --------------------------------------------------------------------------------

def test_extract_requires_incumbent():
    snap = toy_snapshot()
    _, catalog = build(snap)
    with pytest.raises(NoIncumbentError):
        extract_schedule(MilpSolution(Status.INFEASIBLE, None, None, np.inf), catalog, snap)


def test_values_round_trip(table1_solved):
    snap, model, catalog, sol, sched = table1_solved
    x = values_from_schedule(sched, catalog)
    assert not audit(model, x)
    assert model.objective_value(x) == pytest.approx(sol.objective, rel=1e-9)
    again = schedule_from_values(x, catalog)
    np.testing.assert_allclose(again.soc_kwh, sched.soc_kwh)


def test_schedule_csv_layout():
    snap = toy_snapshot()
    _, catalog, sol = solve(snap)
    buf = io.StringIO()
    extract_schedule(sol, catalog, snap).write_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "step,entity,series,value"
    # per step: 5 EV series, 3 charger series, 2 site series
    assert len(lines) == 1 + 3 * (5 + 3 + 2)
    assert "1,ev:1,charge_kw,10.0" in lines


# -- solved reference instance: formulation invariants -----------------------------------------

def test_incumbent_audit_empty(table1_solved):
    _, model, _, sol, _ = table1_solved
    assert sol.gap <= 1.5e-4
    assert not audit(model, sol.values)


def test_exclusivity(table1_solved):
    _, _, _, _, s = table1_solved
    assert not np.any((s.charge_kw > 1e-7) & (s.discharge_kw > 1e-7))
    assert not np.any((s.draw_kw > 1e-7) & (s.feed_kw > 1e-7))


def test_multiplexing(table1_solved):
    snap, _, _, _, s = table1_solved
    for c_i, c in enumerate(snap.chargers):
        cols = [i for i, e in enumerate(snap.fleet) if e.charger_id == c.id]
        assert np.all(s.active[:, cols].sum(axis=1) <= c.dc_converter_count)
        busy = ((s.charge_kw[:, cols] + s.discharge_kw[:, cols] + s.reserve_up_kw[:, cols]
                 + s.reserve_down_kw[:, cols]) > 1e-7).sum(axis=1)
        assert np.all(busy <= c.dc_converter_count)


def test_soc_recursion(table1_solved):
    snap, _, _, _, s = table1_solved
    for i, e in enumerate(snap.fleet):
        for t in range(e.arrival_step, e.departure_step):
            expected = soc_next(s.soc_kwh[t, i], s.charge_kw[t, i], s.discharge_kw[t, i],
                                 e.eff_charge, e.eff_discharge, snap.step_hours)
            assert s.soc_kwh[t + 1, i] == pytest.approx(expected, abs=1e-6)
        assert s.soc_kwh[e.arrival_step, i] == e.arrival_soc_kwh
        present = slice(e.arrival_step, e.departure_step + 1)
        assert np.all(s.soc_kwh[present, i] >= e.soc_min_kwh - 1e-6)
        assert np.all(s.soc_kwh[present, i] <= e.soc_max_kwh + 1e-6)
        assert s.soc_kwh[e.departure_step, i] <= departure_target(e) + 1e-6


def test_dc_link_balance(table1_solved):
    snap, _, _, _, s = table1_solved
    for c_i, c in enumerate(snap.chargers):
        cols = [i for i, e in enumerate(snap.fleet) if e.charger_id == c.id]
        lhs = (s.pv_kw[:, c_i] + s.draw_kw[:, c_i] + s.discharge_kw[:, cols].sum(axis=1)) * c.eff_conv
        rhs = (s.feed_kw[:, c_i] + s.charge_kw[:, cols].sum(axis=1)) / c.eff_conv
        assert np.max(np.abs(lhs - rhs)) <= 1e-6


def test_network_caps_and_curtailment(table1_solved):
    snap, _, _, _, s = table1_solved
    assert np.all(s.import_kw <= snap.limits.import_cap_kw + 1e-6)
    assert np.all(s.export_kw <= snap.limits.export_cap_kw + 1e-6)
    np.testing.assert_allclose(s.import_kw - s.export_kw, s.draw_kw.sum(1) - s.feed_kw.sum(1),
                               atol=1e-6)
    for c_i, c in enumerate(snap.chargers):
        assert np.all(s.pv_kw[:, c_i] <= snap.pv_available_kw(c) + 1e-6)


def test_taper_endpoints(table1_solved):
    snap, _, _, _, s = table1_solved
    for i, e in enumerate(snap.fleet):
        for t in range(e.arrival_step, e.departure_step):
            b = s.soc_kwh[t, i]
            cap_ch = e.charge_max_kw / (1 - snap.taper_charge) * (1 - b / e.soc_max_kwh)
            cap_dis = -e.discharge_min_kw / (snap.taper_discharge * e.soc_max_kwh) * b
            assert s.charge_kw[t, i] <= cap_ch + 1e-6
            assert s.discharge_kw[t, i] <= cap_dis + 1e-6


def test_cost_breakdown_matches_objective(table1_solved):
    snap, _, _, sol, s = table1_solved
    report = cost_breakdown(s, snap)
    assert report.total_usd == pytest.approx(sol.objective, rel=1e-6)
    assert report.total_usd == pytest.approx(sum(report.signed_components().values()), rel=1e-9)


def test_reserves_never_change_soc(table1_solved):
    snap, _, _, _, s = table1_solved
    for i, e in enumerate(snap.fleet):
        t = slice(e.arrival_step, e.departure_step)
        moved = snap.step_hours * (s.charge_kw[t, i] * e.eff_charge - s.discharge_kw[t, i] / e.eff_discharge)
        change = s.soc_kwh[e.departure_step, i] - s.soc_kwh[e.arrival_step, i]
        assert change == pytest.approx(moved.sum(), abs=1e-5)


# -- cost breakdown examples ----------------------------------------------------------------------

def test_penalty_for_shortfall():
    T = 4
    snap = scenario([ev(a=0, d=2, demand=2.0, soc_a=10.0)], [charger()], flat_market(T),
                    PvForecast(np.zeros(T)), v2g_enabled=False, reserves_enabled=False)
    sched = Schedule.zeros(snap)
    sched.soc_kwh[:, 0] = 10.0
    report = cost_breakdown(sched, snap)
    assert report.penalty_usd == pytest.approx(2.0)
    assert report.total_usd == pytest.approx(2.0)


def test_zero_schedule_zero_cost():
    T = 4
    snap = scenario([], [charger()], flat_market(T), PvForecast(np.zeros(T)))
    report = cost_breakdown(Schedule.zeros(snap), snap)
    assert all(v == 0 for v in report.signed_components().values())
    assert report.total_usd == 0


def test_reserve_income_example():
    snap = scenario([ev(a=0, d=1, demand=0.0)], [charger()],
                    MarketSeries(np.array([0.039, 0.039]), np.array([0.038, 0.038]),
                                 np.array([0.0125, 0.0]), np.zeros(2)),
                    PvForecast(np.zeros(2), 0.1))
    sched = Schedule.zeros(snap)
    sched.soc_kwh[:, 0] = 10.0
    sched.reserve_up_kw[0, 0] = 1.0
    report = cost_breakdown(sched, snap)
    assert report.reserve_income_usd == pytest.approx(0.25 * 0.9 * 0.9216 * 0.0125)
    assert report.reserve_income_usd == pytest.approx(0.002592)


def test_pv_cost_is_constant_offset():
    T = 4
    snap = scenario([], [charger(pv=10.0)], flat_market(T), PvForecast(np.full(T, 0.5)), pv_cost=0.02)
    model, catalog, sol = solve(snap)
    report = cost_breakdown(extract_schedule(sol, catalog, snap), snap)
    assert report.pv_cost_usd == pytest.approx(0.25 * 0.02 * 5.0 * T)
    assert report.total_usd == pytest.approx(sol.objective)


def test_cost_breakdown_dimension_mismatch():
    snap = toy_snapshot()
    other = scenario([], [charger()], flat_market(3), PvForecast(np.zeros(3)))
    with pytest.raises(ValueError):
        cost_breakdown(Schedule.zeros(other), snap)


# -- accepted fleets are schedulable -----------------------------------------------------------------

@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 10_000))
def test_accepted_tiny_fleets_schedulable(seed):
    from evpv.domain import accepted_fleet
    snap, _ = accepted_fleet(tiny_snapshot(np.random.default_rng(seed)))
    model, catalog, sol = solve(snap)
    assert sol.status in (Status.OPTIMAL, Status.GAP_LIMIT)
    sched = extract_schedule(sol, catalog, snap)
    report = cost_breakdown(sched, snap)
    assert report.total_usd == pytest.approx(sol.objective, rel=1e-6, abs=1e-9)


def test_network_cap_binds():
    T = 4
    fleet = [ev("a", a=0, d=3, demand=6.0, soc_a=10.0, charger="c1"),
             ev("b", a=0, d=3, demand=6.0, soc_a=10.0, charger="c2")]
    snap = scenario(fleet, [charger("c1"), charger("c2")], flat_market(T), PvForecast(np.zeros(T)),
                    SiteLimits(np.full(T, 6.0), np.full(T, 6.0)), v2g_enabled=False,
                    reserves_enabled=False)
    _, catalog, sol = solve(snap)
    sched = extract_schedule(sol, catalog, snap)
    assert np.all(sched.import_kw <= 6.0 + 1e-9)
