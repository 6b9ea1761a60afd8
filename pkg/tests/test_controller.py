import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from freqnet.controller import (
    ControllerGains,
    OptimizerState,
    StateLayout,
    optimizer_derivative,
    optimizer_storage,
    project_box_velocity,
    project_feasible,
    project_orthant_velocity,
    step_optimizer_projected_euler,
)

from conftest import one_bus_problem


def test_box_projection_cases():
    lo, hi = np.zeros(3), np.ones(3)
    np.testing.assert_array_equal(project_box_velocity([0.5, 0.2, 0.9], [1.0, -2.0, 3.0], lo, hi), [1, -2, 3])
    assert project_box_velocity([1.0], [1.0], [0.0], [1.0])[0] == 0.0
    assert project_box_velocity([0.0], [1.0], [0.0], [1.0])[0] == 1.0
    assert project_box_velocity([0.0], [-1.0], [0.0], [1.0])[0] == 0.0
    with pytest.raises(ValueError):
        project_box_velocity([2.0], [0.0], [0.0], [1.0])


def test_orthant_projection_cases():
    np.testing.assert_array_equal(project_orthant_velocity([0.5, 2.0], [-1.0, 1.0]), [-1.0, 1.0])
    assert project_orthant_velocity([0.0], [-1.0])[0] == 0.0
    assert project_orthant_velocity([0.0], [1.0])[0] == 1.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(0.01, 5), st.integers(0, 2),
                          st.floats(0, 1), st.floats(-5, 5), st.floats(0, 1)), min_size=1, max_size=8))
def test_projection_inequality(rows):
    lo = np.array([r[0] for r in rows])
    hi = lo + np.array([r[1] for r in rows])
    x = np.array([[l, h, l + f * (h - l)][k] for (l, h), k, f in
                  zip(zip(lo, hi), [r[2] for r in rows], [r[3] for r in rows])])
    v = np.array([r[4] for r in rows])
    zf = lo + np.array([r[5] for r in rows]) * (hi - lo)
    P = project_box_velocity(x, v, lo, hi, tol=0.0)
    # (x - z)^T Pi(x, v) <= (x - z)^T v for every feasible z
    assert (x - zf) @ P <= (x - zf) @ v + 1e-12


def test_derivative_vanishes_at_kkt(ieee14_final, ieee14):
    problem, point = ieee14_final
    z = OptimizerState.from_kkt(point).flat()
    f = optimizer_derivative(problem, ieee14.gains, z, np.zeros(4))
    assert np.abs(f).max() < 1e-8


def test_derivative_toy_stationary(unit_gains):
    problem = one_bus_problem()
    z = np.array([2.0, 0.0, -1.0])
    np.testing.assert_allclose(optimizer_derivative(problem, unit_gains, z, [0.0]), 0.0)


def test_phi_block_has_zero_sum(ieee14):
    problem, gains, lay = ieee14.problem, ieee14.gains, ieee14.layout
    rng = np.random.default_rng(0)
    z = project_feasible(problem, rng.normal(0, 0.3, (50, lay.size)))
    f = optimizer_derivative(problem, gains, z, rng.normal(size=(50, 4)))
    assert np.abs(f[:, lay.phi].sum(axis=1)).max() < 1e-12


def test_derivative_dimension_checks(ieee14):
    with pytest.raises(ValueError):
        optimizer_derivative(ieee14.problem, ieee14.gains, np.zeros(5), np.zeros(4))
    with pytest.raises(ValueError):
        optimizer_derivative(ieee14.problem, ieee14.gains, np.zeros(73), np.zeros(3))


def test_storage_examples():
    lay = StateLayout(1, 1, 0, 0)
    gains = ControllerGains(tau_u=2.0)
    assert optimizer_storage(gains, np.zeros(3), np.zeros(3), lay) == 0.0
    assert optimizer_storage(gains, np.array([1.0, 0, 0]), np.zeros(3), lay) == pytest.approx(1.0)


def test_euler_fixed_point_and_feasibility(ieee14_final, ieee14):
    problem, point = ieee14_final
    z = OptimizerState.from_kkt(point).flat()
    z1 = step_optimizer_projected_euler(problem, ieee14.gains, z, np.zeros(4), 6e-4)
    assert np.abs(z1 - z).max() < 1e-11
    lay = ieee14.layout
    rng = np.random.default_rng(1)
    for _ in range(20):
        zr = project_feasible(problem, rng.normal(0, 0.5, lay.size))
        out = step_optimizer_projected_euler(problem, ieee14.gains, zr, rng.normal(size=4), 0.05)
        assert np.all(out[lay.u] >= problem.u_lo) and np.all(out[lay.u] <= problem.u_hi)
        assert np.all(out[lay.rho_plus] >= 0) and np.all(out[lay.rho_minus] >= 0)
        assert abs(out[lay.phi].mean()) < 1e-14


def test_euler_consistency_at_interior_point(ieee14):
    problem, gains, lay = ieee14.problem, ieee14.gains, ieee14.layout
    rng = np.random.default_rng(2)
    z = np.zeros(lay.size)
    z[lay.u] = [0.5, 0.3, 0.2, 0.1]
    z[lay.rho_plus] = z[lay.rho_minus] = 1.0
    z[lay.lam] = rng.normal(size=14)
    y = rng.normal(size=4)
    f = optimizer_derivative(problem, gains, z, y)
    h = 1e-9
    np.testing.assert_allclose((step_optimizer_projected_euler(problem, gains, z, y, h) - z) / h,
                               f, rtol=1e-5, atol=1e-4)


def test_storage_dissipation_along_frozen_measurement(ieee14_final, ieee14):
    """Discrete S_o increments obey the dissipation bound up to O(h)."""
    problem, point = ieee14_final
    gains, lay = ieee14.gains, ieee14.layout
    z_star = OptimizerState.from_kkt(point).flat()
    net = problem.net

    def worst_excess(h, steps):
        rng = np.random.default_rng(3)
        z = project_feasible(problem, z_star + rng.normal(0, 0.01, lay.size))
        out = -np.inf
        for _ in range(steps):
            y = np.zeros(4)
            nxt = step_optimizer_projected_euler(problem, gains, z, y, h)
            dS = optimizer_storage(gains, nxt, z_star, lay) - optimizer_storage(gains, z, z_star, lay)
            u = z[lay.u]
            r = net.G @ u - problem.d - net.L @ z[lay.phi]
            bound = -(u - point.u) @ (problem.Q * (u - point.u)) - gains.kappa * r @ r
            out = max(out, dS / h - bound)
            z = nxt
        return out

    coarse = worst_excess(1e-3, 200)
    fine = worst_excess(1e-4, 2000)
    assert fine <= max(coarse / 5, 1e-12)
