import numpy as np
import pytest

from freqnet.report import (
    expected_workload,
    format_dispatch,
    format_steady_state,
    format_workload,
    sampled_coordinate_counts,
    steady_state_rows,
    workload_from_meta,
)
from freqnet.rbc import default_partition
from freqnet.sim import run_closed_loop
from freqnet.traceio import TraceTable, read_trace_csv, trace_table, write_trace_csv


@pytest.fixture(scope="module")
def rbc_trace(ieee14):
    sc = ieee14.with_overrides(horizon=8.0, rbc=True, seed=7)
    return sc, run_closed_loop(sc)


def test_csv_roundtrip(tmp_path, rbc_trace):
    sc, tr = rbc_trace
    path = tmp_path / "trace.csv"
    written = write_trace_csv(path, tr, sc, stride=3)
    back = read_trace_csv(path)
    assert list(back.columns) == list(written.columns)
    for k in written.columns:
        np.testing.assert_allclose(back[k], written[k], rtol=1e-11, atol=1e-300)
    assert back.meta["seed"] == 7 and back.meta["mode"] == "rbc"
    assert back.meta["monitored_lines"] == "2-4"
    assert back.meta["rows"] == len(back)
    assert back["t"][-1] == pytest.approx(tr.t[-1])


def test_columns_carry_physical_flows(rbc_trace):
    sc, tr = rbc_trace
    table = trace_table(tr, sc)
    assert table["tie_1_2_mw"][0] == pytest.approx(87.7, abs=1e-6)
    assert set(table.matching("u_", "_mw")) == {"u_1_b2_mw", "u_2_b3_mw", "u_3_b6_mw", "u_4_b8_mw"}
    assert "flow_2_4_mw" in table.columns
    assert len(table.matching("omega_b")) == 14


def test_workload_from_meta(rbc_trace):
    _, tr = rbc_trace
    w = workload_from_meta(tr.meta)
    assert w.mode == "rbc" and w.blocks_per_step == 1.0 and w.n_z == 73
    assert w.full_update_total == w.steps * 73
    assert w.relative_load == pytest.approx(1 / 39, rel=0.05)
    with pytest.raises(ValueError):
        workload_from_meta({"steps": 0, "n_z": 73, "coords_written": 0, "blocks_drawn": 0})
    with pytest.raises(ValueError):
        workload_from_meta({})


def test_expected_workload_table():
    full, rbc = expected_workload(300.0, 6e-4, default_partition(4, 14, 1, 20))
    assert full.steps == rbc.steps == 500000
    assert full.coords_written == 36_500_000
    assert round(rbc.coords_written) == 935897
    assert 100 * rbc.relative_load == pytest.approx(2.56, abs=0.005)
    text = format_workload([full, rbc])
    assert "2.56%" in text and "100.00%" in text


def test_sampled_counts_match_simulation(rbc_trace):
    sc, tr = rbc_trace
    count = sampled_coordinate_counts(sc.rbc.partition, tr.meta["steps"], [7])[0]
    assert count == tr.meta["coords_written"]


def test_format_dispatch(ieee14_final):
    problem, point = ieee14_final
    text = format_dispatch(problem, point)
    assert "38.5071" in text and "2-4" in text and "55.6500" in text
    assert "6.000000 MW" in text and "87.7000 MW" in text


def test_steady_state(rbc_trace):
    sc, tr = rbc_trace
    rows = dict(steady_state_rows(trace_table(tr, sc)))
    # three seconds after the load step the exchange is still recovering
    assert 80.0 < rows["tie_1_2_mw"] < 90.0
    assert rows["max |omega| overall [pu]"] >= rows["max |omega| final [pu]"]
    assert "gamma final" in format_steady_state(trace_table(tr, sc))
    with pytest.raises(ValueError):
        steady_state_rows(TraceTable({}, {"t": np.zeros(0)}))


def test_read_rejects_malformed(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("# a=1\n")
    with pytest.raises(ValueError, match="header"):
        read_trace_csv(p)
    p.write_text("t,x\n1,2,3\n")
    with pytest.raises(ValueError, match="columns"):
        read_trace_csv(p)
    p.write_text("# oops\nt\n")
    with pytest.raises(ValueError, match="preamble"):
        read_trace_csv(p)
