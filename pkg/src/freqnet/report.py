"""Plain-text summaries: dispatch solutions, cyber workload and steady states."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from freqnet.dispatch import DispatchProblem, KKTPoint, kkt_residual, residual_h
from freqnet.rbc import BlockPartition, make_rng, sample_blocks

__all__ = [
    "Workload",
    "workload_from_meta",
    "expected_workload",
    "sampled_coordinate_counts",
    "format_workload",
    "format_dispatch",
    "steady_state_rows",
    "format_steady_state",
]


@dataclass(frozen=True)
class Workload:
    """Cyber-state update counts of one run.

    ``relative_load`` compares the coordinates written with a full update of
    every coordinate at every step over the same steps.
    """

    mode: str
    steps: int
    n_z: int
    n_blocks: int
    blocks_per_step: float
    coords_per_step: float
    coords_written: float
    full_update_total: int

    @property
    def relative_load(self) -> float:
        return self.coords_written / self.full_update_total if self.full_update_total else 0.0


def workload_from_meta(meta: dict) -> Workload:
    """Observed workload recorded in a trace preamble."""
    for key in ("steps", "n_z", "coords_written", "blocks_drawn"):
        if key not in meta:
            raise ValueError(f"trace metadata lacks {key!r}")
    steps, n_z = int(meta["steps"]), int(meta["n_z"])
    if steps <= 0:
        raise ValueError("trace covers no steps")
    written = int(meta["coords_written"])
    rbc = meta.get("mode") == "rbc"
    n_blocks = int(meta.get("n_blocks", 1))
    return Workload(mode=str(meta.get("mode", "continuous")), steps=steps, n_z=n_z,
                    n_blocks=n_blocks if rbc else 1,
                    blocks_per_step=int(meta["blocks_drawn"]) / steps if rbc else 1.0,
                    coords_per_step=written / steps, coords_written=written,
                    full_update_total=steps * n_z)


def expected_workload(horizon: float, epsilon: float, partition: BlockPartition) -> tuple[Workload, Workload]:
    """Full-update and expected RBC workloads at sampling period ``epsilon``.

    Returns ``(full, rbc)``; the RBC count is the expectation
    ``steps * sum_beta p_beta |beta|``.
    """
    steps = int(round(horizon / epsilon))
    n_z = partition.n_z
    per = partition.expected_coords_per_step
    full = Workload("full", steps, n_z, partition.n_b, float(partition.n_b), float(n_z),
                    float(steps * n_z), steps * n_z)
    rbc = Workload("rbc", steps, n_z, partition.n_b, 1.0, per, steps * per, steps * n_z)
    return full, rbc


def sampled_coordinate_counts(partition: BlockPartition, steps: int, seeds) -> np.ndarray:
    """Coordinates written over ``steps`` RBC draws, one count per seed.

    Uses the same draw sequence as the closed-loop runs, so each count equals
    the ``coords_written`` of the matching simulation.
    """
    sizes = partition.sizes
    return np.array([int(sizes[sample_blocks(make_rng(s), partition.probs, steps)].sum())
                     for s in seeds])


def format_workload(rows) -> str:
    lines = [f"{'mode':<11}{'steps':>10}{'blocks/step':>13}{'coords/step':>13}"
             f"{'total coords':>15}{'rel. load':>11}"]
    for w in rows:
        lines.append(f"{w.mode:<11}{w.steps:>10d}{w.blocks_per_step:>13.4g}{w.coords_per_step:>13.4f}"
                     f"{w.coords_written:>15.6g}{100 * w.relative_load:>10.2f}%")
    return "\n".join(lines)


def format_dispatch(problem: DispatchProblem, point: KKTPoint) -> str:
    """Solution table in MW with binding constraints, multipliers and KKT residuals."""
    net = problem.net
    spec = net.spec
    base = spec.base_mva
    out = ["unit  bus    u* [MW]   u_ref [MW]   bound"]
    for j, bus in enumerate(spec.generators):
        tag = ""
        if abs(point.u[j] - problem.u_lo[j]) < 1e-9:
            tag = "lower"
        elif abs(point.u[j] - problem.u_hi[j]) < 1e-9:
            tag = "upper"
        out.append(f"{j + 1:>4}  {bus:>3}  {point.u[j] * base:9.4f}  {problem.u_ref[j] * base:11.4f}   {tag}")
    out.append(f"redispatch sum(u*) - sum(u_ref) = {(point.u.sum() - problem.u_ref.sum()) * base:.6f} MW")
    flows = net.K @ point.phi
    for t, (a, b) in enumerate(spec.tie_pairs):
        out.append(f"tie {a}->{b}: {float(net.T[t] @ flows) * base:.4f} MW "
                   f"(schedule {problem.p_sch[t] * base:.4f}, pi = {point.pi[t]:.6g})")
    hp, hm = residual_h(problem, point.phi)
    binding = [k for k in range(net.m) if abs(hp[k]) < 1e-8 or abs(hm[k]) < 1e-8]
    if binding:
        out.append("binding line limits:")
        for k in binding:
            side = "upper" if abs(hp[k]) < 1e-8 else "lower"
            mult = point.rho_plus[k] if side == "upper" else point.rho_minus[k]
            out.append(f"  {spec.branches[k].name:<7} {flows[k] * base:9.4f} MW  {side}  rho = {mult:.6g}")
    else:
        out.append("binding line limits: none")
    out.append("lambda: " + " ".join(f"{v:.5g}" for v in point.lam))
    rep = kkt_residual(problem, point)
    out.append("KKT residuals: " + ", ".join(f"{k}={getattr(rep, k):.2e}" for k in
                                            ("r_norm", "g_norm", "h_violation", "stationarity_u",
                                             "stationarity_phi", "complementarity")))
    return "\n".join(out)


def steady_state_rows(table) -> list[tuple[str, float]]:
    """Terminal values of the MW columns and monitors of a :class:`~freqnet.traceio.TraceTable`."""
    if len(table) == 0:
        raise ValueError("trace has no samples")
    rows = []
    for prefix, suffix in (("u_", "_mw"), ("tie_", "_mw"), ("flow_", "_mw")):
        for name, col in table.matching(prefix, suffix).items():
            rows.append((name, float(col[-1])))
    omega = np.column_stack(list(table.matching("omega_").values()))
    rows.append(("max |omega| final [pu]", float(np.abs(omega[-1]).max())))
    rows.append(("max |omega| overall [pu]", float(np.abs(omega).max())))
    rows.append(("gamma final", float(np.sqrt(max(table["gamma2"][-1], 0.0)))))
    return rows


def format_steady_state(table) -> str:
    return "\n".join(f"{name:<26} {value:14.6g}" for name, value in steady_state_rows(table))
