import re
import subprocess
import sys

import pytest

from freqnet.cli import build_parser, main

CASE = "[bus]\n1\n[gen]\n1\n"
TOY = ("[network]\ncase = one.case\n[dispatch]\nQ = 1\nu_ref = 0\nu_lo = 0\nu_hi = {hi}\n"
       "d = 30\n[sim]\nhorizon = 1\n")


@pytest.fixture
def toy(tmp_path):
    (tmp_path / "one.case").write_text(CASE)
    ok = tmp_path / "one.ini"
    ok.write_text(TOY.format(hi=100))
    bad = tmp_path / "infeasible.ini"
    bad.write_text(TOY.format(hi=10))
    return ok, bad


def test_solve_builtin(capsys):
    assert main(["solve", "--builtin", "ieee14"]) == 0
    out = capsys.readouterr().out
    assert "38.5071" in out and "7.4929" in out
    assert re.search(r"2-4\s+55\.6500 MW\s+upper", out)
    assert "87.7000 MW" in out


def test_solve_one_bus_toy(toy, capsys):
    assert main(["solve", str(toy[0])]) == 0
    assert re.search(r"1\s+1\s+30\.0000", capsys.readouterr().out)


def test_solve_infeasible_toy(toy, capsys):
    assert main(["solve", str(toy[1])]) == 1
    assert "infeasible" in capsys.readouterr().err


def test_missing_and_corrupt_scenarios(tmp_path, capsys):
    assert main(["solve", str(tmp_path / "absent.ini")]) == 1
    corrupt = tmp_path / "corrupt.ini"
    corrupt.write_text("[network]\ncase = ieee14\n[dispatch]\nQ = 1\n")
    assert main(["verify", str(corrupt), "--quick"]) == 1
    assert "missing required key" in capsys.readouterr().err


def test_simulate_is_deterministic(tmp_path, capsys):
    args = ["simulate", "--builtin", "ieee14", "--rbc", "on", "--seed", "7", "--horizon", "1",
            "--no-plots"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    capsys.readouterr()
    # the second run also gives the timing without any one-off kernel compilation
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    out = capsys.readouterr().out
    run = "ieee14_rbc_unfiltered_seed7"
    a = (tmp_path / "a" / run / "trace.csv").read_bytes()
    b = (tmp_path / "b" / run / "trace.csv").read_bytes()
    assert a == b
    elapsed = float(re.search(r"steps in ([0-9.]+) s", out).group(1))
    assert elapsed < 1.0


def test_simulate_writes_plots_under_env_root(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("FREQNET_OUT", str(tmp_path))
    assert main(["simulate", "--builtin", "ieee14", "--horizon", "0.5", "--filter", "on"]) == 0
    run = tmp_path / "ieee14_continuous_filtered"
    names = sorted(p.name for p in run.iterdir())
    assert names == sorted(["trace.csv"] + [f"trace_{f}.svg" for f in
                                            ("frequency", "dispatch", "tie_flow", "line_flow", "storage")])
    head = (run / "trace.csv").read_text().splitlines()[:40]
    assert "# filter=on" in head and any(h.startswith("# delay_down_eff=0.0399") for h in head)


def test_report(tmp_path, capsys):
    assert main(["simulate", "--builtin", "ieee14", "--rbc", "on", "--horizon", "2", "--no-plots",
                 "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    path = tmp_path / "ieee14_rbc_unfiltered_seed0" / "trace.csv"
    assert main(["report", str(path)]) == 0
    out = capsys.readouterr().out
    assert re.search(r"rbc\s+3333\s+1\s+1\.8", out)
    assert re.search(r"full\s+3333\s+39\s+73\.0000", out)


def test_report_rejects_empty_trace(tmp_path, capsys):
    empty = tmp_path / "empty.csv"
    empty.write_text("# steps=10\n# n_z=73\n# coords_written=730\n# blocks_drawn=10\nt,omega_b1\n")
    assert main(["report", str(empty)]) == 1
    assert "no samples" in capsys.readouterr().err


def test_verify_selected_criteria(capsys):
    assert main(["verify", "--builtin", "ieee14", "--only", "2", "9"]) == 0
    out = capsys.readouterr().out
    assert "criterion 2 [PASS]" in out and "criterion 9 [PASS]" in out
    assert main(["verify", "--builtin", "ieee14", "--only", "12"]) == 1


def test_numerical_failure_exit_code(tmp_path, capsys):
    from freqnet.builtin import IEEE14_SCENARIO
    stiff = tmp_path / "stiff.ini"
    stiff.write_text(IEEE14_SCENARIO.replace("kappa = 1.0", "kappa = 10.0")
                     .replace("tau_u = 0.5", "tau_u = 1").replace("tau_phi = 30", "tau_phi = 1")
                     .replace("tau_lambda = 0.07", "tau_lambda = 1").replace("tau_pi = 0.15", "tau_pi = 1")
                     .replace("tau_rho = 0.02", "tau_rho = 1"))
    assert main(["simulate", str(stiff), "--horizon", "1", "--out", str(tmp_path)]) == 2
    assert "numerical failure" in capsys.readouterr().err


def test_help_documents_every_flag():
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices
    text = sub["simulate"].format_help()
    for flag in ("--builtin", "--seed", "--filter", "--rbc", "--horizon", "--step", "--out"):
        assert flag in text
    assert "--quick" in sub["verify"].format_help()
    assert "Exit codes" in parser.format_help()


def test_argument_errors():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["simulate", "--builtin", "ieee14", "--filter", "maybe"])
    with pytest.raises(SystemExit):
        build_parser().parse_args(["solve"])


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "freqnet.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "simulate" in res.stdout
