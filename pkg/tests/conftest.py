import numpy as np
import pytest

from freqnet.controller import ControllerGains
from freqnet.dispatch import DispatchProblem
from freqnet.network import Branch, NetworkSpec, build_matrices
from freqnet.scenario import builtin_scenario


def make_net(buses, branches, gens, areas=None, ties=None, base_mva=100.0):
    buses = tuple(buses)
    spec = NetworkSpec(buses, tuple(Branch(*b) for b in branches), tuple(gens),
                       areas or {b: 1 for b in buses}, ties or {}, base_mva=base_mva)
    return build_matrices(spec)


def one_bus_problem(d=2.0, u_ref=1.0, u_lo=-10.0, u_hi=10.0):
    """J = 1/2 (u - u_ref)^2 on a single bus with no lines and no ties."""
    net = make_net([1], [], [1])
    return DispatchProblem(net, [1.0], [u_ref], [d], np.zeros(0), np.zeros(0), np.zeros(0),
                           [u_lo], [u_hi])


@pytest.fixture(scope="session")
def ieee14():
    return builtin_scenario()


@pytest.fixture(scope="session")
def ieee14_final(ieee14):
    from freqnet.dispatch import solve_dispatch_oracle
    problem = ieee14.final_problem()
    return problem, solve_dispatch_oracle(problem)


@pytest.fixture
def unit_gains():
    return ControllerGains()
