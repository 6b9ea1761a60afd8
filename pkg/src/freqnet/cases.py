"""Random small closed-loop scenarios for property-based checks.

Every generated case is strictly feasible by construction: an interior
dispatch ``u0`` is drawn first, the demand is chosen to balance it, the tie
schedule is the exchange ``u0`` produces and every flow limit leaves a
margin around the flows of ``u0``. With probability one half a single line
limit is then pulled in towards the unconstrained optimum so that it binds.
Cases whose solution binds a constraint with a vanishing multiplier are
redrawn, since strict complementarity is part of the standing assumptions.
"""

from __future__ import annotations

import numpy as np

from freqnet.controller import ControllerGains
from freqnet.dispatch import (
    DispatchProblem,
    InfeasibleDispatchError,
    solve_dispatch_oracle,
    strict_complementarity_audit,
)
from freqnet.interface import WaveChannelConfig
from freqnet.network import Branch, NetworkSpec, build_matrices
from freqnet.plant import PlantParams
from freqnet.rbc import RbcConfig, default_partition
from freqnet.scenario import Disturbance, ScenarioConfig

__all__ = ["random_network", "random_problem", "random_scenario"]


def random_network(rng: np.random.Generator, n: int):
    """Connected graph on buses ``1..n``: a random tree plus a few chords."""
    buses = tuple(range(1, n + 1))
    order = rng.permutation(buses)
    edges = set()
    for i in range(1, n):
        a, b = int(order[i]), int(order[rng.integers(i)])
        edges.add((min(a, b), max(a, b)))
    for _ in range(int(rng.integers(0, n))):
        a, b = (int(v) for v in rng.choice(buses, 2, replace=False))
        edges.add((min(a, b), max(a, b)))
    branches = []
    for a, b in sorted(edges):
        if rng.random() < 0.5:
            a, b = b, a
        branches.append(Branch(a, b, float(rng.uniform(1.0, 5.0))))
    n_g = int(rng.integers(1, min(3, n) + 1))
    gens = tuple(int(g) for g in rng.choice(buses, n_g, replace=False))
    areas = {b: 1 for b in buses}
    ties = {}
    if n >= 3 and rng.random() < 0.5:
        # split along the tree order so both areas are nonempty
        cut = int(rng.integers(1, n))
        areas = {int(b): (1 if i < cut else 2) for i, b in enumerate(order)}
        members = tuple(k for k, br in enumerate(branches) if areas[br.from_bus] != areas[br.to_bus])
        if members:
            ties = {(1, 2): members}
    spec = NetworkSpec(buses, tuple(branches), gens, areas, ties, base_mva=100.0)
    return build_matrices(spec)


def random_problem(rng: np.random.Generator, net) -> DispatchProblem:
    n, n_g = net.n, net.n_g
    u_hi = rng.uniform(0.5, 1.5, n_g)
    u_lo = np.zeros(n_g)
    u0 = rng.uniform(0.2, 0.8) * u_hi
    share = rng.dirichlet(np.ones(n))
    d = share * u0.sum() + rng.normal(0.0, 0.05, n)
    d += (u0.sum() - d.sum()) / n
    phi0 = np.linalg.lstsq(net.L, net.G @ u0 - d, rcond=None)[0]
    flows0 = net.K @ (phi0 - phi0.mean())
    margin = rng.uniform(0.1, 0.4, net.m)
    p_sch = net.T @ flows0
    u_ref = rng.uniform(0.0, 1.2, n_g) * u_hi
    Q = rng.uniform(1.0, 8.0, n_g)
    problem = DispatchProblem(net, Q, u_ref, d, p_sch, flows0 - margin, flows0 + margin, u_lo, u_hi)
    if net.m and rng.random() < 0.5:
        star = solve_dispatch_oracle(problem)
        flows = net.K @ star.phi
        k = int(np.argmax(np.abs(flows - flows0)))
        gap = flows[k] - flows0[k]
        if abs(gap) > 1e-3:
            f_lo, f_hi = problem.f_lo.copy(), problem.f_hi.copy()
            limit = flows0[k] + rng.uniform(0.3, 0.7) * gap
            if gap > 0:
                f_hi[k] = limit
            else:
                f_lo[k] = limit
            problem = DispatchProblem(net, Q, u_ref, d, p_sch, f_lo, f_hi, u_lo, u_hi)
    return problem


def random_scenario(seed: int, max_tries: int = 50) -> ScenarioConfig:
    """Random closed-loop scenario with ``n <= 6`` buses.

    The run starts either at the solution for the base demand followed by a
    random step change, or from a cold start (zero optimizer state, flat
    plant, empty channels).
    """
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        net = random_network(rng, int(rng.integers(2, 7)))
        problem = random_problem(rng, net)
        point = solve_dispatch_oracle(problem)
        if strict_complementarity_audit(problem, point):
            continue
        warm = bool(rng.random() < 0.5)
        events = ()
        if warm:
            bus = int(rng.choice(net.spec.buses))
            delta = float(rng.uniform(-3.0, 3.0))
            d_new = problem.d.copy()
            d_new[net.spec.bus_index(bus)] += delta / net.spec.base_mva
            try:
                after = solve_dispatch_oracle(problem.with_demand(d_new))
            except InfeasibleDispatchError:
                continue
            if strict_complementarity_audit(problem.with_demand(d_new), after):
                continue
            events = (Disturbance(1.0, bus, delta),)
        n = net.n
        plant = PlantParams(rng.uniform(0.1, 0.4, n), rng.uniform(0.05, 0.3, n))
        gains = ControllerGains(tau_u=rng.uniform(0.3, 1.0), tau_phi=rng.uniform(2.0, 5.0),
                                tau_lambda=rng.uniform(0.3, 1.0), tau_pi=rng.uniform(0.3, 1.0),
                                tau_plus=0.3, tau_minus=0.3, kappa=float(rng.uniform(0.5, 1.5)))
        channel = WaveChannelConfig(eta=float(rng.uniform(0.5, 2.0)),
                                    delay_down=float(rng.uniform(0.002, 0.02)),
                                    delay_up=float(rng.uniform(0.002, 0.02)),
                                    filter_enabled=bool(rng.random() < 0.5),
                                    zeta_u=0.01, zeta_omega=0.02, step=2e-4)
        rbc = RbcConfig(1e-3, seed, default_partition(net.n_g, n, net.n_t, net.m))
        return ScenarioConfig(name=f"random-{seed}", net=net, problem=problem, plant=plant,
                              gains=gains, channel=channel, rbc=rbc, disturbances=events,
                              horizon=200.0, step=2e-4, record_every=500,
                              init="warm" if warm else "cold")
    raise RuntimeError(f"no admissible random scenario after {max_tries} draws (seed {seed})")
