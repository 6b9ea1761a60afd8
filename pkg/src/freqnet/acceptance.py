"""Acceptance suite: numbered checks of the benchmark claims and library properties.

Each check returns a :class:`CriterionResult`; :func:`run_acceptance` runs a
selection and never raises for a failing or crashing check, so the caller
can print one verdict line per criterion. Checks that need closed-loop runs
share them through :class:`RunCache`.

Criteria 1 and 2 always use the embedded IEEE 14-bus scenario (their
targets are the benchmark's reference numbers); the others use whichever scenario is
passed in.
"""

from __future__ import annotations

import math
import time
import traceback
from dataclasses import dataclass

import numpy as np

from freqnet.cases import random_scenario
from freqnet.controller import (
    OptimizerState,
    optimizer_derivative,
    project_box_velocity,
    project_orthant_velocity,
)
from freqnet.dispatch import kkt_residual, solve_dispatch_oracle
from freqnet.interface import (
    decode_optimizer_measurement,
    decode_plant_input,
    encode_optimizer_wave,
    encode_plant_wave,
)
from freqnet.rbc import BlockPartition, default_partition, weighted_block_sum
from freqnet.report import expected_workload, sampled_coordinate_counts
from freqnet.scenario import ScenarioConfig, builtin_scenario
from freqnet.sim import (
    calibrate_balance_constant,
    calibrate_dissipation_constant,
    channel_energy_balance,
    equilibrium_scenario,
    estimate_ms_decay,
    monitor_dissipation,
    run_closed_loop,
    run_continuous,
    run_rbc,
    run_to_convergence,
)

__all__ = [
    "CriterionResult",
    "RunCache",
    "CRITERIA",
    "QUICK",
    "TRACKING_BOUND_PU",
    "TRACKING_AFTER_S",
    "run_acceptance",
    "format_result",
]

QUICK = (1, 2, 4, 8, 9)
# post-transient bound on |u_rbc - u_continuous| (0.25 MW on a 100 MVA base),
# applied from 15 s after the last disturbance; observed values stay below 0.07 MW
TRACKING_BOUND_PU = 2.5e-3
TRACKING_AFTER_S = 15.0


@dataclass(frozen=True)
class CriterionResult:
    number: int
    title: str
    passed: bool
    detail: str
    seconds: float = 0.0


class RunCache:
    """Lazily computed closed-loop runs shared between criteria."""

    def __init__(self, scenario: ScenarioConfig):
        self.scenario = scenario
        self._runs = {}

    def get(self, key, fn):
        if key not in self._runs:
            self._runs[key] = fn()
        return self._runs[key]

    def continuous(self, filtered: bool):
        sc = self.scenario.with_overrides(filter=True) if filtered else self.scenario
        return self.get(("cont", filtered), lambda: (sc, run_continuous(sc)))

    def rbc(self, seed: int, filtered: bool = False):
        sc = self.scenario.with_overrides(filter=True) if filtered else self.scenario
        return self.get(("rbc", filtered, seed), lambda: (sc, run_rbc(sc, seed=seed)))


def _result(number, title, checks):
    """``checks`` is a list of ``(ok, text)``; the criterion passes when all do."""
    passed = all(ok for ok, _ in checks)
    detail = "; ".join(f"{text}{'' if ok else ' [FAIL]'}" for ok, text in checks)
    return CriterionResult(number, title, passed, detail)


# -- 1 ------------------------------------------------------------------------

def criterion_workload(cache: RunCache, quick: bool = False) -> CriterionResult:
    sc = builtin_scenario()
    eps, horizon = sc.rbc.epsilon, sc.horizon
    part = sc.rbc.partition
    full, rbc = expected_workload(horizon, eps, part)
    expected_rbc = 500000 * 73 / 39
    seeds = range(10)
    counts = sampled_coordinate_counts(part, rbc.steps, seeds)
    rel_dev = np.abs(counts / rbc.coords_written - 1.0)
    checks = [
        (rbc.steps == 500000, f"steps {rbc.steps}"),
        (full.full_update_total == 36_500_000, f"full-update coords {full.full_update_total:.4g}"),
        (round(rbc.coords_written) == 935897 and abs(rbc.coords_written - expected_rbc) < 1e-6,
         f"expected RBC coords {rbc.coords_written:.1f}"),
        (abs(100 * rbc.relative_load - 2.56) <= 0.05, f"relative load {100 * rbc.relative_load:.3f}%"),
        (bool(np.all(rel_dev <= 0.01)), f"10-seed counts within {100 * rel_dev.max():.3f}% of expectation"),
    ]
    if not quick:
        run_sc, trace = cache.rbc(0)
        written = trace.meta["coords_written"]
        ref = sampled_coordinate_counts(run_sc.rbc.partition, trace.meta["steps"], [0])[0]
        checks.append((written == ref and trace.meta["blocks_drawn"] == trace.meta["steps"],
                       f"simulated run wrote {written} coords in {trace.meta['blocks_drawn']} draws"))
    return _result(1, "Workload arithmetic", checks)


# -- 2 ------------------------------------------------------------------------

def criterion_steady_state(cache: RunCache, quick: bool = False) -> CriterionResult:
    t0 = time.perf_counter()
    sc = builtin_scenario()
    problem = sc.final_problem()
    point = solve_dispatch_oracle(problem)
    elapsed = time.perf_counter() - t0
    base = sc.base_mva
    net = sc.net
    flows = net.K @ point.phi * base
    k24 = net.spec.branch_index(2, 4)
    tie = float(net.T[0] @ flows)
    redispatch = (point.u.sum() - problem.u_ref.sum()) * base
    u_mw = point.u * base
    target = np.array([38.52, 7.48, 0.0, 0.0])
    checks = [
        (abs(redispatch - 6.0) <= 1e-6, f"sum(u*) - sum(u_ref) = {redispatch:.9f} MW"),
        (abs(tie - 87.7) <= 1e-3, f"tie {tie:.6f} MW"),
        (abs(flows[k24] - 55.65) <= 1e-3 and point.rho_plus[k24] > 0,
         f"line 2-4 {flows[k24]:.6f} MW, rho+ = {point.rho_plus[k24]:.4g}"),
        (bool(np.all(np.abs(u_mw - target) <= 0.5)), "u* = [" + ", ".join(f"{v:.3f}" for v in u_mw) + "] MW"),
        (kkt_residual(problem, point).max() < 1e-8, f"KKT residual {kkt_residual(problem, point).max():.1e}"),
        (elapsed < 1.0, f"{elapsed:.3f} s"),
    ]
    return _result(2, "Constrained steady state", checks)


# -- 3 ------------------------------------------------------------------------

def _oracle_gap(scenario, trace):
    problem = scenario.final_problem()
    ref = solve_dispatch_oracle(problem)
    gap = max(np.abs(trace.u[-1] - ref.u).max(), np.abs(trace.phi[-1] - ref.phi).max())
    return gap, kkt_residual(problem, trace.final_point()).max()


def criterion_oracle(cache: RunCache, quick: bool = False, n_random: int = 25) -> CriterionResult:
    worst_gap, worst_kkt, unsettled = 0.0, 0.0, []
    cases = [("scenario", cache.scenario)] + [(f"random-{s}", random_scenario(s)) for s in range(n_random)]
    for name, sc in cases:
        trace, settled = run_to_convergence(sc.with_overrides(rbc=False))
        gap, kkt = _oracle_gap(sc, trace)
        if not settled:
            unsettled.append(name)
        worst_gap, worst_kkt = max(worst_gap, gap), max(worst_kkt, kkt)
    checks = [
        (not unsettled, f"{len(cases) - len(unsettled)}/{len(cases)} runs settled"
         + (f" (not: {', '.join(unsettled)})" if unsettled else "")),
        (worst_gap <= 1e-5, f"max |(u, phi) - oracle| = {worst_gap:.1e} pu"),
        (worst_kkt < 1e-5, f"max KKT residual {worst_kkt:.1e}"),
    ]
    return _result(3, "Oracle equivalence", checks)


# -- 4 ------------------------------------------------------------------------

def _scattering_identities(n: int, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    # the impedance is a channel scalar, so draw it per batch
    for eta in rng.uniform(0.1, 10.0, 10):
        p, gw, u, y = (rng.normal(0.0, 1.0, (n // 10, 3)) for _ in range(4))
        sp_plus, sp_minus = encode_plant_wave(p, gw, eta)
        so_plus, so_minus = encode_optimizer_wave(u, y, eta)
        errs = [
            0.5 * np.sum(sp_plus ** 2 - sp_minus ** 2, axis=1) + np.sum(gw * p, axis=1),
            0.5 * np.sum(so_plus ** 2 - so_minus ** 2, axis=1) - np.sum(u * y, axis=1),
            decode_plant_input(sp_minus, gw, eta) - p,
            decode_optimizer_measurement(u, so_minus, eta) - y,
        ]
        worst = max(worst, float(max(np.abs(e).max() for e in errs)))
    return worst


def criterion_passivity(cache: RunCache, quick: bool = False) -> CriterionResult:
    ident = _scattering_identities(10_000)
    checks = [(ident <= 1e-12, f"scattering identities on 1e4 pairs: {ident:.1e}")]
    sc = cache.scenario
    if quick:
        sc = sc.with_overrides(horizon=min(sc.horizon, 30.0))
        cache = RunCache(sc)
    # unfiltered lossless line: continuous and RBC runs
    for label, (run_sc, trace) in (("continuous", cache.continuous(False)), ("rbc", cache.rbc(0))):
        C = calibrate_balance_constant(run_sc)
        rep = channel_energy_balance(trace, tol=C * run_sc.h)
        checks.append((rep.n_violations == 0 and rep.n_checked > 0,
                       f"unfiltered {label}: {rep.n_violations}/{rep.n_checked} balance violations "
                       f"(max residual {rep.max_residual:.1e}, tol {C * run_sc.h:.1e})"))
    # filtered channel: nonnegative loss, O(h) balance
    run_sc, trace = cache.continuous(True)
    rep = channel_energy_balance(trace, tol=calibrate_balance_constant(run_sc) * run_sc.h)
    checks.append((rep.min_step_loss >= 0.0, f"filtered min per-step loss {rep.min_step_loss:.1e}"))
    checks.append((rep.n_violations == 0, f"filtered: {rep.n_violations}/{rep.n_checked} balance violations"))
    short = run_sc.with_overrides(horizon=min(run_sc.horizon, 15.0))
    coarse = channel_energy_balance(run_closed_loop(short)).max_residual
    fine = channel_energy_balance(run_closed_loop(short.with_overrides(
        step=run_sc.h / 10, record_every=run_sc.record_every * 10))).max_residual
    ratio = coarse / fine if fine > 0 else math.inf
    checks.append((5.0 <= ratio <= 20.0, f"filtered balance residual h vs h/10 ratio {ratio:.2f} (first order)"))
    return _result(4, "Passivity identities", checks)


# -- 5 ------------------------------------------------------------------------

def criterion_dissipation(cache: RunCache, quick: bool = False) -> CriterionResult:
    checks = []
    for filtered in (False, True):
        run_sc, trace = cache.continuous(filtered)
        C = calibrate_dissipation_constant(run_sc)
        rep = monitor_dissipation(trace, tol=C * run_sc.h)
        rt = 1e3 * (run_sc.channel.effective_delays[0] + run_sc.channel.effective_delays[1])
        checks.append((rep.n_violations == 0 and rep.n_checked > 0,
                       f"{'filtered' if filtered else 'unfiltered'} ({rt:.1f} ms round trip): "
                       f"{rep.n_violations}/{rep.n_checked} violations, max excess {rep.max_excess:.1e}, "
                       f"tol {C * run_sc.h:.1e}"))
    return _result(5, "Closed-loop dissipation", checks)


# -- 6 ------------------------------------------------------------------------

def criterion_ms_decay(cache: RunCache, quick: bool = False, n_seeds: int = 20) -> CriterionResult:
    sc = cache.scenario
    seeds = range(n_seeds)
    full = estimate_ms_decay(sc, seeds)
    half = estimate_ms_decay(sc.with_overrides(epsilon=sc.rbc.epsilon / 2), seeds)
    ratio = half.per_step / full.per_step if full.per_step else math.nan
    checks = [
        (not full.degenerate and full.per_step < 0,
         f"slope {full.per_step:.3e}/step ({full.per_second:.4f}/s) over {full.window[0]:.0f}-{full.window[1]:.0f} s"),
        (full.r2 > 0.9, f"R^2 {full.r2:.4f}"),
        (not half.degenerate and half.r2 > 0.9, f"half-epsilon R^2 {half.r2:.4f}"),
        (0.35 <= ratio <= 0.65, f"per-step slope ratio (eps/2 : eps) {ratio:.4f}"),
    ]
    return _result(6, f"Mean-square decay ({n_seeds} seeds)", checks)


# -- 7 ------------------------------------------------------------------------

def criterion_tracking(cache: RunCache, quick: bool = False, seeds=(0, 1, 2)) -> CriterionResult:
    sc, cont = cache.continuous(False)
    t_after = max([ev.time for ev in sc.disturbances], default=0.0) + TRACKING_AFTER_S
    worst_term, worst_sup = 0.0, 0.0
    for seed in seeds:
        _, rbc = cache.rbc(seed)
        term = max(np.abs(rbc.u[-1] - cont.u[-1]).max(), np.abs(rbc.phi[-1] - cont.phi[-1]).max(),
                   np.abs(rbc.omega[-1] - cont.omega[-1]).max())
        # compare on the sampling instants both traces share
        tc = np.interp(rbc.t, cont.t, np.arange(cont.t.size))
        hit = np.abs(tc - np.round(tc)) < 1e-6
        rows_c = np.round(tc[hit]).astype(int)
        sel = rbc.t[hit] >= t_after
        sup = float(np.abs(rbc.u[hit][sel] - cont.u[rows_c][sel]).max()) if sel.any() else math.inf
        worst_term, worst_sup = max(worst_term, term), max(worst_sup, sup)
    checks = [
        (worst_term <= 1e-3, f"terminal (u, phi, omega) gap {worst_term:.1e} pu"),
        (worst_sup <= TRACKING_BOUND_PU,
         f"sup |u_rbc - u_cont| after t = {t_after:g} s: {worst_sup:.2e} pu (bound {TRACKING_BOUND_PU:g})"),
    ]
    return _result(7, "RBC tracks the continuous loop", checks)


# -- 8 ------------------------------------------------------------------------

def criterion_equilibrium(cache: RunCache, quick: bool = False) -> CriterionResult:
    eq = equilibrium_scenario(cache.scenario).with_overrides(horizon=10.0)
    checks = []
    for filtered in (False, True):
        for rbc in (False, True):
            sc = eq.with_overrides(filter=filtered, rbc=rbc)
            trace = run_closed_loop(sc)
            ref = trace.references[0]
            dev = max(np.abs(trace.theta - ref.point.phi).max(), np.abs(trace.omega).max(),
                      np.abs(trace.z - ref.z_star).max(), np.abs(trace.p - ref.point.u).max(),
                      np.abs(trace.y).max())
            checks.append((dev <= 1e-8, f"{'filtered' if filtered else 'raw'}/{'rbc' if rbc else 'continuous'} "
                                        f"{dev:.1e}"))
    return _result(8, "Equilibrium preservation", checks)


# -- 9 ------------------------------------------------------------------------

def _box_instances(rng, n, k):
    lo = rng.normal(0.0, 1.0, (n, k))
    hi = lo + rng.uniform(0.1, 2.0, (n, k))
    pick = rng.integers(0, 3, (n, k))
    x = np.where(pick == 0, lo, np.where(pick == 1, hi, rng.uniform(lo, hi)))
    return lo, hi, x, pick


def _projection_properties(n: int, seed: int = 0) -> tuple[float, int]:
    """Worst violation of the projection inequality and count of cone mismatches."""
    rng = np.random.default_rng(seed)
    k = 6
    lo, hi, x, pick = _box_instances(rng, n, k)
    zf = rng.uniform(lo, hi)
    xi = rng.normal(0.0, 1.0, (n, k))
    P = project_box_velocity(x, xi, lo, hi, tol=0.0)
    worst = float(np.max(np.sum((x - zf) * P, axis=1) - np.sum((x - zf) * xi, axis=1)))
    # Pi(x, v) = 0 exactly when v lies in the normal cone at x
    in_cone = rng.random(n) < 0.5
    mag = np.abs(rng.normal(0.0, 1.0, (n, k)))
    cone_v = np.where(pick == 0, -mag, np.where(pick == 1, mag, 0.0))
    v = np.where(in_cone[:, None], cone_v, rng.normal(0.0, 1.0, (n, k)))
    member = np.all(np.where(pick == 0, v <= 0, np.where(pick == 1, v >= 0, v == 0)), axis=1)
    zero = np.all(project_box_velocity(x, v, lo, hi, tol=0.0) == 0, axis=1)
    mismatch = int(np.count_nonzero(member != zero))
    # orthant: same two properties with hi = +inf
    xo = np.where(rng.random((n, k)) < 0.5, 0.0, rng.uniform(0.0, 2.0, (n, k)))
    zo = rng.uniform(0.0, 2.0, (n, k))
    Po = project_orthant_velocity(xo, xi, tol=0.0)
    worst = max(worst, float(np.max(np.sum((xo - zo) * Po, axis=1) - np.sum((xo - zo) * xi, axis=1))))
    member_o = np.all(np.where(xo == 0.0, xi <= 0, xi == 0), axis=1)
    zero_o = np.all(Po == 0, axis=1)
    mismatch += int(np.count_nonzero(member_o != zero_o))
    return worst, mismatch


def _unbiasedness(scenario: ScenarioConfig, n: int = 200, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    prob, gains, lay = scenario.problem, scenario.gains, scenario.layout
    net = scenario.net
    parts = [default_partition(net.n_g, net.n, net.n_t, net.m)]
    weights = rng.uniform(0.1, 1.0, parts[0].n_b)
    parts.append(BlockPartition(parts[0].blocks, weights / weights.sum(), "weighted"))
    z_star = OptimizerState.from_kkt(solve_dispatch_oracle(prob)).flat()
    worst = 0.0
    for _ in range(n):
        z = z_star + rng.normal(0.0, 0.1, lay.size)
        z[lay.u] = np.clip(z[lay.u], prob.u_lo, prob.u_hi)
        z[lay.rho_plus] = np.abs(z[lay.rho_plus])
        z[lay.rho_minus] = np.abs(z[lay.rho_minus])
        z[lay.phi] -= z[lay.phi].mean()
        f = optimizer_derivative(prob, gains, z, rng.normal(0.0, 0.1, net.n_g))
        for part in parts:
            worst = max(worst, float(np.abs(weighted_block_sum(part, f) - f).max()))
    return worst


def criterion_projection(cache: RunCache, quick: bool = False) -> CriterionResult:
    worst, mismatch = _projection_properties(100_000)
    unb = _unbiasedness(cache.scenario)
    checks = [
        (worst <= 1e-12, f"projection inequality on 1e5 instances: worst excess {worst:.1e}"),
        (mismatch == 0, f"normal-cone characterisation mismatches {mismatch}"),
        (unb <= 1e-12, f"weighted block sum vs f: {unb:.1e}"),
    ]
    return _result(9, "Projection and unbiasedness", checks)


CRITERIA = {
    1: criterion_workload,
    2: criterion_steady_state,
    3: criterion_oracle,
    4: criterion_passivity,
    5: criterion_dissipation,
    6: criterion_ms_decay,
    7: criterion_tracking,
    8: criterion_equilibrium,
    9: criterion_projection,
}

_TITLES = {
    1: "Workload arithmetic", 2: "Constrained steady state", 3: "Oracle equivalence",
    4: "Passivity identities", 5: "Closed-loop dissipation", 6: "Mean-square decay",
    7: "RBC tracks the continuous loop", 8: "Equilibrium preservation",
    9: "Projection and unbiasedness",
}


def run_acceptance(scenario: ScenarioConfig | None = None, quick: bool = False, only=None,
                   on_result=None) -> list[CriterionResult]:
    """Run the selected criteria (all, or :data:`QUICK` when ``quick``).

    ``on_result`` is called with each result as soon as it is available.
    """
    cache = RunCache(scenario if scenario is not None else builtin_scenario())
    numbers = sorted(only) if only is not None else (QUICK if quick else sorted(CRITERIA))
    results = []
    for num in numbers:
        t0 = time.perf_counter()
        try:
            res = CRITERIA[num](cache, quick=quick)
        except Exception as exc:  # a crash is reported as a failure of that criterion
            last = traceback.extract_tb(exc.__traceback__)[-1]
            res = CriterionResult(num, _TITLES[num], False,
                                  f"{type(exc).__name__}: {exc} ({last.name}:{last.lineno})")
        res = CriterionResult(res.number, res.title, res.passed, res.detail, time.perf_counter() - t0)
        results.append(res)
        if on_result is not None:
            on_result(res)
    return results


def format_result(res: CriterionResult) -> str:
    return (f"criterion {res.number} [{'PASS' if res.passed else 'FAIL'}] {res.title} "
            f"({res.seconds:.1f} s): {res.detail}")
