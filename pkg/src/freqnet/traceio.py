"""CSV traces: a ``# key=value`` preamble, one header row, then one row per sample.

Column names carry their unit when it is not per-unit: ``u_1_b2_mw`` is the
first controllable unit (at bus 2) in MW, ``tie_1_2_mw`` the signed tie
aggregate from area 1 to area 2 and ``flow_2_4_mw`` the flow on branch 2-4
in its stored orientation. Flows and ties are the physical ones, computed
from the plant angles; the optimizer's own angle estimates appear as
``phi_b*``.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field

import numpy as np

from freqnet.network import NetworkMatrices

__all__ = [
    "TraceTable",
    "monitored_lines",
    "trace_columns",
    "trace_table",
    "write_trace_csv",
    "read_trace_csv",
]


def monitored_lines(net: NetworkMatrices, problem, references, tol: float = 1e-9) -> list[int]:
    """Branches whose flow limit binds at any segment solution.

    Falls back to the most heavily loaded branch of the last segment when no
    limit binds anywhere.
    """
    K = net.K
    active = set()
    for ref in references:
        flow = K @ ref.point.phi
        hit = (flow >= problem.f_hi - tol) | (flow <= problem.f_lo + tol)
        active.update(int(k) for k in np.nonzero(hit)[0])
    if not active and references and net.m:
        flow = K @ references[-1].point.phi
        span = np.maximum(problem.f_hi - problem.f_lo, 1e-12)
        active.add(int(np.argmax(np.abs(flow) / span)))
    return sorted(active)


def _names(net: NetworkMatrices):
    spec = net.spec
    gens = [f"{j + 1}_b{bus}" for j, bus in enumerate(spec.generators)]
    lines = [f"{br.from_bus}_{br.to_bus}" for br in spec.branches]
    ties = [f"{a}_{b}" for a, b in spec.tie_pairs]
    return spec.buses, gens, lines, ties


def trace_columns(trace, net: NetworkMatrices, monitored=()) -> dict:
    """Ordered mapping ``column name -> samples`` for a :class:`~freqnet.sim.SimTrace`."""
    base = net.spec.base_mva
    buses, gens, lines, ties = _names(net)
    lay = trace.layout
    cols = {"t": trace.t}
    for i, b in enumerate(buses):
        cols[f"omega_b{b}"] = trace.omega[:, i]
    for j, g in enumerate(gens):
        cols[f"theta_g{g}"] = trace.theta[:, net.gen_buses[j]]
    for j, g in enumerate(gens):
        cols[f"u_{g}_mw"] = trace.z[:, lay.u][:, j] * base
    for name, sl, labels in (("phi", lay.phi, buses), ("lam", lay.lam, buses)):
        block = trace.z[:, sl]
        for i, b in enumerate(labels):
            cols[f"{name}_b{b}"] = block[:, i]
    for t, tie in enumerate(ties):
        cols[f"pi_{tie}"] = trace.z[:, lay.pi][:, t]
    for name, sl in (("rho_plus", lay.rho_plus), ("rho_minus", lay.rho_minus)):
        block = trace.z[:, sl]
        for k, ln in enumerate(lines):
            cols[f"{name}_{ln}"] = block[:, k]
    for j, g in enumerate(gens):
        cols[f"p_{g}_mw"] = trace.p[:, j] * base
    for j, g in enumerate(gens):
        cols[f"y_{g}"] = trace.y[:, j]
    flows = trace.theta @ net.K.T * base
    for t, tie in enumerate(ties):
        cols[f"tie_{tie}_mw"] = flows @ net.T[t]
    for k in monitored:
        cols[f"flow_{lines[k]}_mw"] = flows[:, k]
    cols.update({"S_p": trace.S_p, "S_o": trace.S_o, "S_ch": trace.S_ch,
                 "gamma2": trace.gamma2, "diss": trace.diss})
    if trace.ch_supply is not None:
        cols["ch_supply"], cols["ch_loss"] = trace.ch_supply, trace.ch_loss
    cols["segment"] = trace.segment.astype(float)
    return cols


@dataclass
class TraceTable:
    """A trace as read back from CSV: preamble metadata and named columns."""

    meta: dict = field(default_factory=dict)
    columns: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.columns.get("t", ()))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    def matching(self, prefix: str, suffix: str = "") -> dict:
        return {k: v for k, v in self.columns.items() if k.startswith(prefix) and k.endswith(suffix)}


def trace_table(trace, scenario, stride: int = 1) -> TraceTable:
    """In-memory table with the same content :func:`write_trace_csv` would write."""
    if stride < 1:
        raise ValueError("stride must be at least 1")
    net = scenario.net
    mon = monitored_lines(net, scenario.problem, trace.references)
    cols = trace_columns(trace, net, mon)
    idx = np.arange(0, len(trace), stride)
    if idx[-1] != len(trace) - 1:
        idx = np.append(idx, len(trace) - 1)
    meta = dict(trace.meta)
    meta["monitored_lines"] = ",".join(net.spec.branches[k].name for k in mon)
    meta["stride"] = stride
    meta["rows"] = idx.size
    return TraceTable(meta, {k: np.asarray(v, float)[idx] for k, v in cols.items()})


def write_trace_csv(path: str | os.PathLike, trace, scenario, stride: int = 1) -> TraceTable:
    """Write every ``stride``-th sample (plus the last) and return the written table."""
    table = trace_table(trace, scenario, stride)
    names = list(table.columns)
    data = np.column_stack([table.columns[k] for k in names])
    buf = io.StringIO()
    for key, value in table.meta.items():
        text = str(value)
        if "\n" in text:
            raise ValueError(f"metadata value for {key!r} spans lines")
        buf.write(f"# {key}={text}\n")
    buf.write(",".join(names) + "\n")
    np.savetxt(buf, data, delimiter=",", fmt="%.12g")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())
    return table


def _parse_value(text: str):
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def read_trace_csv(path: str | os.PathLike) -> TraceTable:
    meta, header, rows = {}, None, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if header is None and line.startswith("#"):
                key, sep, value = line[1:].strip().partition("=")
                if not sep:
                    raise ValueError(f"{path}: preamble line without '=': {line!r}")
                meta[key.strip()] = _parse_value(value.strip())
            elif header is None:
                header = line.split(",")
            else:
                rows.append(line)
    if header is None:
        raise ValueError(f"{path}: no header row")
    if not rows:
        return TraceTable(meta, {k: np.zeros(0) for k in header})
    data = np.loadtxt(io.StringIO("\n".join(rows)), delimiter=",", ndmin=2)
    if data.shape[1] != len(header):
        raise ValueError(f"{path}: {data.shape[1]} values per row but {len(header)} columns")
    return TraceTable(meta, {k: data[:, i] for i, k in enumerate(header)})
