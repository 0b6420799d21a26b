import csv

import pytest

from evpv.cli import (EXIT_INVALID, EXIT_IO, EXIT_OK, DayComparison, main, oracle_check,
                      table_ii_summary)

from conftest import DATA, DAY1

DEDICATED = ["--fleet", str(DATA / "fleet_dedicated.csv"), "--chargers",
             str(DATA / "chargers_dedicated.csv"), "--limits", str(DATA / "limits_dedicated.csv")]


def test_validate_bundled(capsys):
    assert main(["validate"]) == EXIT_OK
    assert "6 of 6 accepted" in capsys.readouterr().out


def test_validate_rejects_low_arrival_soc(tmp_path, capsys):
    rows = (DATA / "fleet_table1.csv").read_text().splitlines()
    rows[3] = rows[3].replace(",10.0,5.0,5.0,24.0,", ",10.0,4.0,5.0,24.0,")
    fleet = tmp_path / "fleet.csv"
    fleet.write_text("\n".join(rows) + "\n")
    assert main(["validate", "--fleet", str(fleet)]) == EXIT_INVALID
    assert "EV 3: rejected (arrival_soc" in capsys.readouterr().out


def test_missing_file_is_io_error(tmp_path, capsys):
    assert main(["validate", "--market", str(tmp_path / "nope.csv")]) == EXIT_IO
    assert "error" in capsys.readouterr().err


def test_malformed_file_is_io_error(tmp_path):
    bad = tmp_path / "market.csv"
    bad.write_text("timestamp,spp_buy,regup,regdn\n2014-07-01T00:00,x,0,0\n")
    assert main(["validate", "--market", str(bad)]) == EXIT_IO


def test_solve_day_empty_fleet(tmp_path):
    fleet = tmp_path / "fleet.csv"
    fleet.write_text((DATA / "fleet_table1.csv").read_text().splitlines()[0] + "\n")
    out = tmp_path / "out"
    assert main(["solve-day", "--fleet", str(fleet), "--out", str(out)]) == EXIT_OK
    assert "status: optimal" in (out / "stats.txt").read_text()
    rows = list(csv.DictReader((out / "schedule.csv").open()))
    assert not any(r["entity"].startswith("ev:") for r in rows)
    # PV is only sold: never any import
    assert all(float(r["value"]) == 0.0 for r in rows if r["series"] == "import_kw")


def test_solve_day_deterministic(tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main(["solve-day", *DEDICATED, "--dt-minutes", "60", "--out", str(out)]) == EXIT_OK
        outs.append(((out / "schedule.csv").read_bytes(), (out / "cost.txt").read_bytes()))
    assert outs[0] == outs[1]


def test_compare_writes_table(tmp_path, capsys):
    out = tmp_path / "cmp"
    assert main(["compare", *DEDICATED, "--no-v2g", "--no-reserves", "--out", str(out)]) == EXIT_OK
    (row,) = list(csv.DictReader((out / "compare.csv").open()))
    assert row["day"] == DAY1.name
    assert float(row["c_opt_usd"]) <= float(row["ar_milp_usd"]) + 1e-6
    assert float(row["c_opt_usd"]) <= float(row["imm_milp_usd"]) + 1e-6
    assert "reduction of mean costs" in (out / "summary.txt").read_text()


def test_mpc_command(tmp_path):
    out = tmp_path / "mpc"
    overlay = tmp_path / "overlay.csv"
    overlay.write_text("step,entity,field,value\n12,site,pv_multiplier,0.92\n0,ev:2,arrival_soc_kwh,18\n")
    code = main(["mpc", *DEDICATED, "--dt-minutes", "60", "--overlay", str(overlay), "--out", str(out)])
    assert code == EXIT_OK
    for name in ("trace.csv", "steps.csv", "summary.txt"):
        assert (out / name).stat().st_size > 0


def test_sweep_two_days(tmp_path):
    out = tmp_path / "sweep"
    code = main(["sweep", *DEDICATED, "--dt-minutes", "60", "--jobs", "2", "--out", str(out)])
    assert code == EXIT_OK
    rows = list(csv.DictReader((out / "compare.csv").open()))
    assert [r["day"] for r in rows] == ["2014-07-01", "2014-07-02"]
    summary = (out / "summary.txt").read_text()
    assert summary.startswith("days: 2")
    for label in ("C_ev AR", "C_ev IMM", "S_PV", "C_ar", "C_imm", "C_opt", "C%_imm", "C%_opt"):
        assert label in summary


def test_sweep_date_window(tmp_path):
    out = tmp_path / "sweep"
    main(["sweep", *DEDICATED, "--dt-minutes", "60", "--start", "2014-07-02", "--out", str(out)])
    assert [r["day"] for r in csv.DictReader((out / "compare.csv").open())] == ["2014-07-02"]
    assert main(["sweep", "--days-dir", str(tmp_path / "none"), "--out", str(out)]) == EXIT_IO


def test_environment_mirrors_flags(tmp_path, monkeypatch):
    out = tmp_path / "env"
    monkeypatch.setenv("EVPV_OUT", str(out))
    monkeypatch.setenv("EVPV_DT_MINUTES", "60")
    monkeypatch.setenv("EVPV_FLEET", str(DATA / "fleet_dedicated.csv"))
    monkeypatch.setenv("EVPV_CHARGERS", str(DATA / "chargers_dedicated.csv"))
    monkeypatch.setenv("EVPV_LIMITS", str(DATA / "limits_dedicated.csv"))
    monkeypatch.setenv("EVPV_NO_V2G", "1")
    assert main(["solve-day"]) == EXIT_OK
    rows = list(csv.DictReader((out / "schedule.csv").open()))
    assert len({r["step"] for r in rows}) == 24
    assert all(float(r["value"]) == 0.0 for r in rows if r["series"] == "discharge_kw")


def test_oracle_check_small():
    assert oracle_check(5, seed=3) == []
    assert main(["oracle-check", "--instances", "3"]) == EXIT_OK


def test_identical_costs_give_zero_reduction():
    row = DayComparison("d", 1.0, 1.0, 0.5, 2.0, 2.0, 2.0, "optimal")
    assert row.pct_imm == 0.0 and row.pct_opt == 0.0
    assert "IMM 0.00 %, OPT 0.00 %" in table_ii_summary([row])


def test_zero_ar_cost_reported_undefined():
    row = DayComparison("d", 0.0, 0.0, 0.0, 0.0, 0.0, -1.0, "optimal")
    assert row.pct_opt is None
    assert "undefined" in table_ii_summary([row])


@pytest.mark.parametrize("flag", ["--symmetric-reserves", "--no-curtailment"])
def test_model_flags_accepted(tmp_path, flag):
    out = tmp_path / "f"
    assert main(["solve-day", *DEDICATED, "--dt-minutes", "60", flag, "--out", str(out)]) == EXIT_OK


def _flat_market(path, prices, regup=0.0125):
    lines = ["timestamp,spp_buy,regup,regdn"]
    lines += [f"2014-07-01T{h:02d}:00,{p},{regup},{regup}" for h, p in enumerate(prices)]
    path.write_text("\n".join(lines) + "\n")
    return path


def test_solve_day_empty_fleet_no_pv_costs_nothing(tmp_path):
    fleet = tmp_path / "fleet.csv"
    fleet.write_text((DATA / "fleet_table1.csv").read_text().splitlines()[0] + "\n")
    chargers = tmp_path / "chargers.csv"
    chargers.write_text("id,pv_rated_kw,inverter_rated_kw,ev_port_rated_kw,dc_converter_count,"
                        "connection_count,eff_conv,pv_scale\n1,0.0,10.0,10.0,1,1,0.96,1.0\n")
    out = tmp_path / "out"
    assert main(["solve-day", "--fleet", str(fleet), "--chargers", str(chargers), "--out", str(out)]) == 0
    assert "total_usd: 0" in (out / "cost.txt").read_text()


def test_solve_day_toy_matches_placement_oracle(tmp_path):
    from oracles import two_step_placement_costs
    fleet = tmp_path / "fleet.csv"
    header = (DATA / "fleet_table1.csv").read_text().splitlines()[0]
    fleet.write_text(header + "\n1,00:00,02:00,9.5,10.0,5.0,60.0,10.0,0.0,0.95,0.95,1.0,1\n")
    chargers = tmp_path / "chargers.csv"
    chargers.write_text("id,pv_rated_kw,inverter_rated_kw,ev_port_rated_kw,dc_converter_count,"
                        "connection_count,eff_conv,pv_scale\n1,0.0,11.0,11.0,1,1,0.96,1.0\n")
    market = _flat_market(tmp_path / "market.csv", [0.10, 0.02, 0.05], regup=0.0)
    pv = tmp_path / "pv.csv"
    pv.write_text("timestamp,power_kw\n" + "".join(f"2014-07-01T{m // 60:02d}:{m % 60:02d},0.0\n"
                                                   for m in range(180)))
    out = tmp_path / "out"
    code = main(["solve-day", "--fleet", str(fleet), "--chargers", str(chargers), "--market",
                 str(market), "--pv", str(pv), "--dt-minutes", "60", "--no-v2g", "--no-reserves", "--gap", "1e-9",
                 "--out", str(out)])
    assert code == EXIT_OK
    report = dict(line.split(": ") for line in (out / "cost.txt").read_text().splitlines() if ": " in line)
    expected = min(two_step_placement_costs([0.10, 0.02], 9.5, 10.0, 1.0, 0.95, 0.96))
    assert float(report["total_usd"]) == pytest.approx(expected, abs=1e-6)


def test_compare_table_i_flat_prices(tmp_path):
    market = _flat_market(tmp_path / "market.csv", [0.039] * 24)
    out = tmp_path / "cmp"
    assert main(["compare", "--market", str(market), "--out", str(out)]) == EXIT_OK
    (row,) = list(csv.DictReader((out / "compare.csv").open()))
    c_ar, c_imm, c_opt = (float(row[k]) for k in ("c_ar_usd", "c_imm_usd", "c_opt_usd"))
    assert c_opt <= c_ar
    # hand-computed reductions from the printed costs
    assert float(row["pct_opt"]) == pytest.approx(100 * (c_ar - c_opt) / c_ar, abs=0.01)
    assert float(row["pct_imm"]) == pytest.approx(100 * (c_ar - c_imm) / c_ar, abs=0.01)


def test_compare_and_mpc_reruns_identical(tmp_path):
    for cmd in (["compare"], ["mpc"]):
        files = []
        for k in range(2):
            out = tmp_path / f"{cmd[0]}{k}"
            main([*cmd, *DEDICATED, "--dt-minutes", "60", "--out", str(out)])
            files.append({p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.suffix == ".csv"})
        assert files[0] == files[1] and files[0]
