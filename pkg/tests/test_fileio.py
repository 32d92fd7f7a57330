import json
import math
import os
import stat

import numpy as np
import pytest

from eigenliquidity.calibration import MarketSeries
from eigenliquidity.cost import ExecutionSchedule
from eigenliquidity.elm import model_from_correlation
from eigenliquidity.errors import InputError
from eigenliquidity.fileio import (
    RunManifest,
    align_to_model,
    atomic_write_text,
    grid_sidecar,
    read_correlation,
    read_json,
    read_market_series,
    read_model,
    read_schedule,
    read_targets,
    series_manifest_path,
    write_csv,
    write_json,
    write_market_series,
    write_matrix,
    write_model,
    write_schedule,
)
from eigenliquidity.kernel import TimeGrid
from oracles import random_correlation


def small_series(units="shares"):
    rng = np.random.default_rng(0)
    p = 100 + np.cumsum(rng.standard_normal((2, 7)), axis=1)
    v = rng.standard_normal((2, 7)) * 1e-3
    return MarketSeries(["AAA", "BBB"], 60.0, p, v, units)


def test_atomic_write_creates_directories_and_is_readable(tmp_path):
    path = atomic_write_text(tmp_path / "a" / "b" / "f.txt", "hello\n")
    assert path.read_text() == "hello\n"
    assert stat.S_IMODE(os.stat(path).st_mode) == 0o644
    assert [p.name for p in path.parent.iterdir()] == ["f.txt"]


def test_json_handles_numpy_and_non_finite(tmp_path):
    path = write_json(tmp_path / "x.json", {"a": np.arange(3), "b": np.float64(1.5), "c": math.inf,
                                           "d": [np.nan], "e": np.bool_(True)})
    doc = read_json(path)
    assert doc == {"a": [0, 1, 2], "b": 1.5, "c": "inf", "d": ["nan"], "e": True}
    json.loads(path.read_text())


def test_malformed_json_names_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "a": 1,\n  oops\n}\n')
    with pytest.raises(InputError, match=r"bad.json:3"):
        read_json(path)
    with pytest.raises(InputError, match="no such file"):
        read_json(tmp_path / "missing.json")


def test_csv_floats_round_trip_exactly(tmp_path):
    values = [0.1, 1 / 3, 1e-300, -2.5e17]
    path = write_csv(tmp_path / "v.csv", ["x"], [[v] for v in values])
    lines = path.read_text().splitlines()
    assert lines[0] == "x"
    assert [float(s) for s in lines[1:]] == values


def test_correlation_csv_with_and_without_header(tmp_path):
    rho = random_correlation(3, np.random.default_rng(1))
    path = write_matrix(tmp_path / "rho.csv", rho, ["A", "B", "C"])
    # write_matrix prefixes each row with its id; strip that for the reader
    rows = [line.split(",")[1:] for line in path.read_text().splitlines()]
    (tmp_path / "hdr.csv").write_text("\n".join(",".join(r) for r in rows) + "\n")
    got, ids = read_correlation(tmp_path / "hdr.csv")
    np.testing.assert_array_equal(got, 0.5 * (rho + rho.T))
    assert ids == ["A", "B", "C"]
    (tmp_path / "bare.csv").write_text("\n".join(",".join(r) for r in rows[1:]) + "\n")
    got, ids = read_correlation(tmp_path / "bare.csv")
    assert ids is None
    np.testing.assert_allclose(got, rho)


def test_correlation_json_forms(tmp_path):
    write_json(tmp_path / "m.json", [[1.0, 0.3], [0.3, 1.0]])
    rho, ids = read_correlation(tmp_path / "m.json")
    assert rho[0, 1] == 0.3 and ids is None
    write_json(tmp_path / "o.json", {"correlation": [[1.0, 0.3], [0.3, 1.0]], "instrument_ids": ["X", "Y"]})
    assert read_correlation(tmp_path / "o.json")[1] == ["X", "Y"]
    write_json(tmp_path / "n.json", {"corr": []})
    with pytest.raises(InputError, match="missing 'correlation'"):
        read_correlation(tmp_path / "n.json")


def test_correlation_csv_errors(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("A,B\n1.0,0.2\n0.2,x\n")
    with pytest.raises(InputError, match=r"bad.csv:3"):
        read_correlation(path)
    path.write_text("A,B,C\n1.0,0.2\n0.2,1.0\n")
    with pytest.raises(InputError):
        read_correlation(path)
    path.write_text("1.0,1.2\n1.2,1.0\n")
    with pytest.raises(InputError):
        read_correlation(path)


def test_model_round_trip(tmp_path):
    rho = random_correlation(4, np.random.default_rng(2))
    model = model_from_correlation(rho, [1e-7, 2e-7, 3e-7, 4e-7], instrument_ids=list("ABCD"))
    back = read_model(write_model(tmp_path / "m.json", model))
    np.testing.assert_array_equal(back.liquidities, model.liquidities)
    np.testing.assert_array_equal(back.eigen.values, model.eigen.values)
    assert back.instrument_ids == model.instrument_ids


def test_schedule_round_trip(tmp_path):
    grid = TimeGrid(3600.0, 6)
    rates = np.random.default_rng(3).standard_normal((2, 6))
    sched = ExecutionSchedule(grid, rates, instrument_ids=["X", "Y"])
    path = write_schedule(tmp_path / "s.csv", sched)
    assert grid_sidecar(path).name == "s.grid.json"
    back = read_schedule(path)
    np.testing.assert_array_equal(back.rates, rates)
    assert back.grid == grid
    assert list(back.instrument_ids) == ["X", "Y"]


def test_schedule_without_index_columns(tmp_path):
    path = tmp_path / "bare.csv"
    path.write_text("X,Y\n1,2\n3,4\n")
    back = read_schedule(path, TimeGrid(100.0, 2))
    np.testing.assert_array_equal(back.rates, [[1, 3], [2, 4]])


def test_schedule_errors(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("bin,time_seconds,X\n0,25,1\n1,75\n")
    with pytest.raises(InputError, match=r"s.csv:3"):
        read_schedule(path, TimeGrid(100.0, 2))
    path.write_text("bin,time_seconds,X\n0,25,1\n")
    with pytest.raises(InputError, match="rows for a grid"):
        read_schedule(path, TimeGrid(100.0, 2))
    with pytest.raises(InputError, match="sidecar"):
        read_schedule(path)


def test_targets_and_alignment(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("instrument,target\nB,2.5\nA,-1\n")
    ids, values = read_targets(path)
    model = model_from_correlation(np.eye(3), 1e-7, instrument_ids=["A", "B", "C"])
    np.testing.assert_array_equal(align_to_model(ids, values, model, fill=0.0), [-1.0, 2.5, 0.0])
    with pytest.raises(InputError, match="missing"):
        align_to_model(ids, values, model)
    with pytest.raises(InputError, match="unknown"):
        align_to_model(["A", "Z"], [1.0, 2.0], model, fill=0.0)
    with pytest.raises(InputError, match="duplicate"):
        align_to_model(["A", "A"], [1.0, 2.0], model, fill=0.0)
    path.write_text("name,value\nA,1\n")
    with pytest.raises(InputError, match=r"t.csv:1"):
        read_targets(path)
    path.write_text("instrument,target\nA,one\n")
    with pytest.raises(InputError, match=r"t.csv:2: cannot parse target"):
        read_targets(path)


@pytest.mark.parametrize("units", ["shares", "risk"])
def test_market_series_round_trip(tmp_path, units):
    s = small_series(units)
    path = write_market_series(tmp_path / "m.csv", s)
    assert series_manifest_path(path).exists()
    back = read_market_series(path)
    np.testing.assert_array_equal(back.prices, s.prices)
    np.testing.assert_array_equal(back.flows, s.flows)
    assert back.dt == 60.0 and back.flow_units == units
    assert back.instrument_ids == s.instrument_ids


def test_market_series_without_manifest_infers_step(tmp_path):
    path = write_market_series(tmp_path / "m.csv", small_series())
    series_manifest_path(path).unlink()
    back = read_market_series(path)
    assert back.dt == 60.0
    assert back.instrument_ids == ("AAA", "BBB")


@pytest.mark.parametrize("body,match", [
    ("timestamp,instrument,price,signed_flow\n0,A,1,0\n60,A,x,0\n", r"m.csv:3: cannot parse price 'x'"),
    ("timestamp,instrument,price,signed_flow\n0,A,1\n", r"m.csv:2: expected 4 fields"),
    ("time,instrument,price,flow\n", r"m.csv:1"),
    ("timestamp,instrument,price,signed_flow\n0,A,1,0\n0,A,1,0\n", r"m.csv:3: duplicate"),
    ("timestamp,instrument,price,signed_flow\n0,A,1,0\n60,A,1,0\n0,B,1,0\n", "gaps"),
    ("timestamp,instrument,price,signed_flow\n0,A,1,0\n60,A,1,0\n180,A,1,0\n", "not uniform"),
    ("timestamp,instrument,price,signed_flow\n0,A,1,nan\n60,A,1,0\n", r"m.csv:2: signed_flow is not finite"),
    ("timestamp,instrument,price,signed_flow\n", "no observations"),
])
def test_malformed_market_series(tmp_path, body, match):
    path = tmp_path / "m.csv"
    path.write_text(body)
    with pytest.raises(InputError, match=match):
        read_market_series(path)


def test_run_manifest_round_trip():
    man = RunManifest("simulate", {"seed": 1}, 1, "0.1.0", "2026-01-01T00:00:00+00:00",
                      inputs={"world": "w.json"})
    assert RunManifest.from_dict(json.loads(json.dumps(man.to_dict()))) == man
    with pytest.raises(InputError, match="missing field"):
        RunManifest.from_dict({"subcommand": "cost"})
