import dataclasses

import numpy as np
import pytest

from freqnet.controller import ControllerGains, OptimizerState
from freqnet.sim import (
    SimulationDiverged,
    channel_energy_balance,
    distance_to_solution,
    equilibrium_scenario,
    monitor_dissipation,
    run_closed_loop,
    run_continuous,
    run_rbc,
    run_reference,
    run_to_convergence,
    segment_references,
    terminal_stationarity,
)

MODES = [(False, False), (False, True), (True, False), (True, True)]
MODE_IDS = ["raw-continuous", "raw-rbc", "filtered-continuous", "filtered-rbc"]


@pytest.fixture(scope="module")
def short(ieee14):
    """The benchmark compressed to 0.4 s with the load step at 0.1 s."""
    events = tuple(dataclasses.replace(e, time=0.1) for e in ieee14.disturbances)
    return dataclasses.replace(ieee14, disturbances=events, horizon=0.4, record_every=10)


@pytest.fixture(scope="module")
def continuous_run(ieee14):
    return run_continuous(ieee14)


@pytest.mark.parametrize("filtered, rbc", MODES, ids=MODE_IDS)
def test_kernel_matches_reference_loop(short, filtered, rbc):
    sc = short.with_overrides(filter=filtered, rbc=rbc, seed=3)
    fast, slow = run_closed_loop(sc), run_reference(sc)
    assert fast.meta["coords_written"] == slow.meta["coords_written"]
    for name in ("t", "theta", "omega", "z", "p", "y", "S_p", "S_o", "S_ch", "gamma2", "diss",
                 "ch_supply", "ch_loss"):
        a, b = getattr(fast, name), getattr(slow, name)
        scale = max(1.0, np.abs(b).max())
        assert np.abs(a - b).max() <= 1e-11 * scale, name
    np.testing.assert_array_equal(fast.segment, slow.segment)


@pytest.mark.parametrize("filtered, rbc", MODES, ids=MODE_IDS)
def test_equilibrium_is_preserved(ieee14, filtered, rbc):
    sc = equilibrium_scenario(ieee14).with_overrides(horizon=2.0, filter=filtered, rbc=rbc)
    tr = run_closed_loop(sc)
    ref = tr.references[0]
    assert np.abs(tr.omega).max() < 1e-9
    assert np.abs(tr.z - ref.z_star).max() < 1e-9
    assert np.abs(tr.theta - ref.point.phi).max() < 1e-9


def test_segment_references(ieee14):
    refs = segment_references(ieee14)
    assert [r.start_step for r in refs] == [0, int(round(5.0 / ieee14.h))]
    np.testing.assert_allclose(refs[1].point.u * 100, [38.507, 7.493, 0, 0], atol=1e-3)


def test_continuous_run_reaches_the_new_dispatch(continuous_run, ieee14_final):
    problem, point = ieee14_final
    tr = continuous_run
    np.testing.assert_allclose(tr.u[-1], point.u, atol=1e-6)
    np.testing.assert_allclose(tr.phi[-1], point.phi, atol=1e-6)
    assert np.abs(tr.omega[-1]).max() < 1e-8
    flows = problem.net.K @ tr.theta[-1] * 100
    assert float(problem.net.T[0] @ flows) == pytest.approx(87.7, abs=1e-4)
    # the frequency dips after the load step and recovers
    k = np.searchsorted(tr.t, 6.0)
    assert tr.omega[:k].min() < -1e-4


def test_filtered_run_same_steady_state(ieee14, ieee14_final):
    problem, point = ieee14_final
    tr = run_continuous(ieee14.with_overrides(filter=True))
    np.testing.assert_allclose(tr.u[-1], point.u, atol=1e-6)
    assert tr.meta["delay_down_eff"] == pytest.approx(0.040, abs=1e-4)


def test_rbc_seed_replay(ieee14):
    sc = ieee14.with_overrides(horizon=6.0)
    a, b = run_rbc(sc, seed=7), run_rbc(sc, seed=7)
    np.testing.assert_array_equal(a.z, b.z)
    np.testing.assert_array_equal(a.omega, b.omega)
    c = run_rbc(sc, seed=8)
    assert not np.array_equal(a.z, c.z)
    assert a.meta["steps"] == a.meta["blocks_drawn"] == 10000


def test_rbc_workload_meta(ieee14):
    tr = run_rbc(ieee14.with_overrides(horizon=3.0), seed=0)
    assert tr.meta["n_blocks"] == 39
    assert tr.meta["coords_written"] / tr.meta["steps"] == pytest.approx(73 / 39, rel=0.05)


def test_distance_to_solution(ieee14_final):
    problem, point = ieee14_final
    from freqnet.controller import StateLayout
    lay = StateLayout.for_problem(problem)
    z = OptimizerState.from_kkt(point).flat()
    assert distance_to_solution(point.phi + 3.0, np.zeros(14), z, point, lay) == pytest.approx(0, abs=1e-12)
    z2 = z.copy()
    z2[lay.lam] += 5.0          # duals do not count
    assert distance_to_solution(point.phi, np.zeros(14), z2, point, lay) == pytest.approx(0, abs=1e-12)
    z2[0] += 0.3
    assert distance_to_solution(point.phi, np.zeros(14), z2, point, lay) == pytest.approx(0.3)


def test_monitors_on_continuous_run(continuous_run):
    rep = monitor_dissipation(continuous_run, tol=1e-18)
    assert rep.n_checked > 0 and rep.n_violations == 0
    bal = channel_energy_balance(continuous_run, tol=1e-15)
    assert bal.n_violations == 0 and bal.max_residual < 1e-15


def test_storages_are_nonnegative(continuous_run):
    for name in ("S_p", "S_o", "S_ch", "gamma2"):
        assert getattr(continuous_run, name).min() >= 0.0


def test_divergence_is_reported(ieee14):
    # unit time constants with kappa = 10 are far too stiff for explicit stepping
    sc = dataclasses.replace(ieee14, gains=ControllerGains(kappa=10.0), horizon=2.0)
    with pytest.raises(SimulationDiverged):
        run_closed_loop(sc)


def test_run_to_convergence_small_case():
    from freqnet.cases import random_scenario
    sc = random_scenario(0)
    tr, ok = run_to_convergence(sc)
    assert ok
    assert terminal_stationarity(sc, tr) < 1e-9


def test_delays_shorter_than_a_step_are_rejected(ieee14):
    sc = dataclasses.replace(ieee14, channel=dataclasses.replace(ieee14.channel, delay_down=0.0))
    with pytest.raises(ValueError):
        run_closed_loop(sc.with_overrides(horizon=0.01))


def test_cold_start_converges():
    from freqnet.cases import random_scenario
    for seed in range(10):
        sc = random_scenario(seed)
        if sc.init == "cold":
            break
    tr, ok = run_to_convergence(sc)
    assert ok
    assert not sc.disturbances


def test_angle_error_bound(continuous_run, ieee14):
    from freqnet.sim import phi_bound_constant, phi_bound_ratio
    assert phi_bound_constant(ieee14.net) == pytest.approx(2.0 / ieee14.net.algebraic_connectivity() ** 2)
    ratio = phi_bound_ratio(continuous_run, ieee14)
    assert 0.0 < ratio <= 1.0
