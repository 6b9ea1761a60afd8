import numpy as np
import pytest

from freqnet.builtin import IEEE14_SCENARIO
from freqnet.scenario import (
    Disturbance,
    ScenarioError,
    apply_disturbance,
    builtin_scenario,
    load_scenario,
    parse_scenario,
)


def _edit(old, new):
    assert old in IEEE14_SCENARIO
    return IEEE14_SCENARIO.replace(old, new)


def test_builtin_contents(ieee14):
    assert ieee14.name == "ieee14"
    assert ieee14.layout.size == 73
    assert ieee14.h == pytest.approx(1.2e-4)
    assert ieee14.n_steps == 2_500_000
    assert ieee14.rbc.partition.n_b == 39
    assert [(e.time, e.bus, e.delta_mw) for e in ieee14.disturbances] == [(5.0, 4, 3.6), (5.0, 5, 2.4)]
    assert ieee14.channel.steps_down == 92


def test_demand_schedule(ieee14):
    d0 = ieee14.demand_at(4.999)
    d1 = ieee14.demand_at(5.0)
    diff = (d1 - d0) * 100
    assert diff[3] == pytest.approx(3.6) and diff[4] == pytest.approx(2.4)
    assert np.count_nonzero(np.abs(diff) > 1e-12) == 2
    np.testing.assert_allclose(ieee14.final_problem().d, d1)


def test_apply_disturbance_standalone():
    d = apply_disturbance(np.zeros(3), (Disturbance(1.0, 2, 50.0),), 2.0, buses=(1, 2, 3), scale=100.0)
    np.testing.assert_allclose(d, [0, 0.5, 0])


def test_overrides(ieee14):
    f = ieee14.with_overrides(filter=True)
    assert f.channel.filter_enabled
    assert f.channel.delay_down == pytest.approx(0.040) and f.channel.delay_up == pytest.approx(0.040)
    r = ieee14.with_overrides(rbc=True, seed=7, horizon=1.0)
    assert r.rbc_enabled and r.rbc.seed == 7 and r.h == pytest.approx(6e-4) and r.n_steps == 1667
    assert r.channel.step == r.h
    assert ieee14.with_overrides(step=1e-4).h == pytest.approx(1e-4)


@pytest.mark.parametrize("text, match", [
    (_edit("[sim]", "[simulation]"), "unknown section"),
    (_edit("horizon = 300", "horizon = 300\nlength = 2"), "unknown key"),
    (_edit("Q = 3, 5, 6, 7\n", ""), "missing required key"),
    (_edit("flow_margin = 80", "flow_margin = 80\nf_hi_margin = 80"), "not both"),
    (_edit("partition = default", "partition = random"), "unknown partition"),
    (_edit("probs = uniform", "probs = 1, 2"), "probs"),
    (_edit("events = 5.0 4 3.6; 5.0 5 2.4", "events = 5.0 99 3.6"), "unknown bus"),
    (_edit("horizon = 300", "horizon = -1"), "horizon"),
    (_edit("Q = 3, 5, 6, 7", "Q = 3, 5, 6"), "expected 1 or 4"),
    ("[network\ncase = ieee14", "syntax"),
], ids=["section", "key", "required", "alias", "partition", "probs", "bus", "horizon", "length",
        "syntax"])
def test_invalid_scenarios(text, match):
    with pytest.raises(ScenarioError, match=match):
        parse_scenario(text)


def test_margin_alias_equivalent():
    a = parse_scenario(IEEE14_SCENARIO)
    b = parse_scenario(_edit("flow_margin = 80", "f_hi_margin = 80"))
    np.testing.assert_array_equal(a.problem.f_hi, b.problem.f_hi)
    np.testing.assert_array_equal(a.problem.f_lo, b.problem.f_lo)


def test_load_from_file(tmp_path):
    (tmp_path / "tiny.case").write_text("[bus]\n1\n2\n[branch]\n1 2 10\n[gen]\n2\n")
    path = tmp_path / "tiny.ini"
    path.write_text("[network]\ncase = tiny.case\n[dispatch]\nQ = 1\nu_ref = 0\nd = 10, 20\n"
                    "[sim]\nhorizon = 2\n")
    sc = load_scenario(path)
    assert sc.name == "tiny" and sc.net.n == 2
    np.testing.assert_allclose(sc.problem.d, [0.1, 0.2])


def test_unknown_builtin():
    with pytest.raises(ScenarioError):
        builtin_scenario("ieee30")
