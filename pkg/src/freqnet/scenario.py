"""Scenario files: one INI document describing a complete closed-loop run.

Grammar (``configparser`` syntax, ``#`` comments, every key optional unless
marked)::

    [network]
    case = ieee14                    # required; builtin name or path relative to the file

    [dispatch]                       # MW quantities, converted with the case base_mva
    Q = 3, 5, 6, 7                   # required; cost weights on per-unit deviations
    u_ref = 40, 0, 0, 0              # required
    u_lo = 0                         # scalar broadcasts
    u_hi = 100
    d = ...                          # required; one net demand per bus
    P_sch = 87.7                     # one entry per tie row
    flow_margin = 80                 # bounds = base-case flow -/+ margin (alias f_hi_margin)
    f_hi = 2-4: 55.65                # per-line overrides "from-to: MW", or a full list
    f_lo = ...

    [plant]
    inertia = 0.2                    # scalar or per-bus list [pu s^2]
    damping = 0.05                   # [pu]

    [controller]
    kappa = 1.0
    tau_u = 0.5                      # tau_* accept a scalar or a per-coordinate list
    tau_phi = 30
    tau_lambda = 0.07
    tau_pi = 0.15
    tau_rho = 0.02
    init = warm                      # warm | cold

    [channel]
    eta = 1.0
    delay_down_ms = 11
    delay_up_ms = 11
    filter = off
    zeta_u_ms = 10
    zeta_omega_ms = 20

    [rbc]
    enabled = off
    epsilon = 0.0006                 # [s]; also the step of RBC runs
    seed = 0
    partition = default              # default | singleton
    probs = uniform                  # uniform | one weight per block

    [disturbance]
    events = 5.0 4 3.6; 5.0 5 2.4    # "time_s bus dMW" entries

    [sim]
    horizon = 300                    # [s]
    step = 0.00012                   # continuous-reference step; default epsilon / 5
    record_every = 50

Unknown sections and keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass

import numpy as np

from freqnet.controller import ControllerGains, StateLayout
from freqnet.dispatch import DispatchProblem
from freqnet.interface import WaveChannelConfig
from freqnet.network import NetworkMatrices, build_matrices, load_case
from freqnet.plant import PlantParams
from freqnet.rbc import BlockPartition, RbcConfig, default_partition, singleton_partition

__all__ = [
    "ScenarioError",
    "Disturbance",
    "ScenarioConfig",
    "parse_scenario",
    "load_scenario",
    "builtin_scenario",
    "base_flows",
    "apply_disturbance",
    "FILTERED_PRESET",
]

# delays and filter used by the wave-filtered variant of the benchmark
FILTERED_PRESET = {"delay_down": 0.040, "delay_up": 0.040, "filter_enabled": True}

_KEYS = {
    "network": {"case"},
    "dispatch": {"q", "u_ref", "u_lo", "u_hi", "d", "p_sch", "flow_margin", "f_hi_margin",
                 "f_hi", "f_lo"},
    "plant": {"inertia", "damping"},
    "controller": {"kappa", "tau_u", "tau_phi", "tau_lambda", "tau_pi", "tau_rho", "init"},
    "channel": {"eta", "delay_down_ms", "delay_up_ms", "filter", "zeta_u_ms", "zeta_omega_ms"},
    "rbc": {"enabled", "epsilon", "seed", "partition", "probs"},
    "disturbance": {"events"},
    "sim": {"horizon", "step", "record_every"},
}
_REQUIRED = {"network": {"case"}, "dispatch": {"q", "u_ref", "d"}}


class ScenarioError(ValueError):
    """Malformed or inconsistent scenario description."""


@dataclass(frozen=True)
class Disturbance:
    time: float      # [s]
    bus: int         # bus id as written in the case
    delta_mw: float


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    """Everything needed to run one closed-loop simulation.

    ``problem.d`` holds the pre-disturbance demand (per-unit). ``step`` is the
    continuous-reference step; RBC runs always advance at ``rbc.epsilon``.
    """

    name: str
    net: NetworkMatrices
    problem: DispatchProblem
    plant: PlantParams
    gains: ControllerGains
    channel: WaveChannelConfig
    rbc: RbcConfig
    rbc_enabled: bool = False
    disturbances: tuple = ()
    horizon: float = 300.0
    step: float | None = None
    record_every: int = 50
    init: str = "warm"

    def __post_init__(self):
        if not self.horizon > 0:
            raise ScenarioError("horizon must be positive")
        if self.step is not None and not self.step > 0:
            raise ScenarioError("step must be positive")
        if self.record_every < 1:
            raise ScenarioError("record_every must be at least 1")
        if self.init not in ("warm", "cold"):
            raise ScenarioError("init must be 'warm' or 'cold'")
        buses = set(self.net.spec.buses)
        for ev in self.disturbances:
            if ev.bus not in buses:
                raise ScenarioError(f"disturbance at unknown bus {ev.bus}")
            if ev.time < 0:
                raise ScenarioError("disturbance times must be nonnegative")
        # the channel always runs on the simulation clock
        if self.channel.step != self.h:
            object.__setattr__(self, "channel", dataclasses.replace(self.channel, step=self.h))

    @property
    def h(self) -> float:
        if self.rbc_enabled:
            return self.rbc.epsilon
        return self.step if self.step is not None else self.rbc.epsilon / 5.0

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.h))

    @property
    def base_mva(self) -> float:
        return self.net.spec.base_mva

    @property
    def layout(self) -> StateLayout:
        return StateLayout.for_problem(self.problem)

    def with_overrides(self, *, filter: bool | None = None, rbc: bool | None = None,
                       seed: int | None = None, horizon: float | None = None,
                       step: float | None = None, epsilon: float | None = None,
                       record_every: int | None = None) -> "ScenarioConfig":
        """Copy with command-line style overrides applied.

        ``filter=True`` switches to the wave-filtered preset (40 ms each way,
        filters on, the scenario's own time constants); ``filter=False``
        only disables the filters.
        """
        channel, rbc_cfg = self.channel, self.rbc
        if filter is True:
            channel = dataclasses.replace(channel, **FILTERED_PRESET)
        elif filter is False:
            channel = dataclasses.replace(channel, filter_enabled=False)
        if seed is not None or epsilon is not None:
            rbc_cfg = RbcConfig(epsilon if epsilon is not None else rbc_cfg.epsilon,
                                seed if seed is not None else rbc_cfg.seed, rbc_cfg.partition)
        return dataclasses.replace(
            self, channel=channel, rbc=rbc_cfg,
            rbc_enabled=self.rbc_enabled if rbc is None else bool(rbc),
            horizon=self.horizon if horizon is None else float(horizon),
            step=self.step if step is None else float(step),
            record_every=self.record_every if record_every is None else int(record_every))

    def final_problem(self) -> DispatchProblem:
        """Dispatch problem for the demand after every scheduled disturbance."""
        return self.problem.with_demand(self.demand_at(float("inf")))

    def demand_at(self, t: float) -> np.ndarray:
        """Per-unit demand in force at time ``t``."""
        return apply_disturbance(self.problem.d, self.disturbances, t,
                                 buses=self.net.spec.buses, scale=self.base_mva)


def apply_disturbance(d_base, schedule, t: float, buses=None, scale: float = 1.0) -> np.ndarray:
    """Piecewise-constant demand: ``d_base`` plus every step change due by ``t``.

    ``schedule`` holds :class:`Disturbance` records or ``(time, bus, delta)``
    tuples; ``buses`` lists the bus ids in row order (default ``1..n``) and
    each delta is divided by ``scale`` (the MVA base when ``d_base`` is
    per-unit).
    """
    d = np.array(d_base, float)
    rows = {b: i for i, b in enumerate(buses if buses is not None else range(1, d.size + 1))}
    for ev in schedule:
        time, bus, delta = (ev.time, ev.bus, ev.delta_mw) if isinstance(ev, Disturbance) else ev
        if t >= time:
            d[rows[bus]] += delta / scale
    return d


# -- parsing -----------------------------------------------------------------

def _floats(text: str, what: str) -> np.ndarray:
    try:
        return np.array([float(tok) for tok in text.replace(",", " ").split()])
    except ValueError as exc:
        raise ScenarioError(f"{what}: expected numbers, got {text!r}") from exc


def _sized(text: str, size: int, what: str) -> np.ndarray:
    vals = _floats(text, what)
    if vals.size == 1:
        return np.full(size, vals[0])
    if vals.size != size:
        raise ScenarioError(f"{what}: expected 1 or {size} values, got {vals.size}")
    return vals


def _flag(text: str, what: str) -> bool:
    low = text.strip().lower()
    if low in ("on", "true", "yes", "1"):
        return True
    if low in ("off", "false", "no", "0"):
        return False
    raise ScenarioError(f"{what}: expected on/off, got {text!r}")


def _line_values(text: str, net: NetworkMatrices, default: np.ndarray, scale: float,
                 what: str) -> np.ndarray:
    """Full per-line list, or ``from-to: value`` overrides on top of ``default``."""
    if ":" not in text:
        return _sized(text, net.m, what) / scale
    out = default.copy()
    for item in text.split(","):
        if not item.strip():
            continue
        try:
            name, value = item.split(":")
            f, t = (int(s) for s in name.strip().split("-"))
            out[net.spec.branch_index(f, t)] = float(value) / scale
        except (ValueError, KeyError) as exc:
            raise ScenarioError(f"{what}: bad line override {item.strip()!r}") from exc
    return out


def base_flows(net: NetworkMatrices, u, d) -> np.ndarray:
    """Branch flows of the lossless DC solution for injections ``G u - d``."""
    inj = net.G @ np.asarray(u, float) - np.asarray(d, float)
    if abs(inj.sum()) > 1e-9 * max(1.0, np.abs(inj).max()):
        raise ScenarioError("base case injections do not balance")
    phi = np.linalg.lstsq(net.L, inj, rcond=None)[0]
    return net.K @ (phi - phi.mean())


def _events(text: str) -> tuple:
    events = []
    for item in text.split(";"):
        if not item.strip():
            continue
        parts = item.split()
        if len(parts) != 3:
            raise ScenarioError(f"disturbance entry {item.strip()!r} is not 'time bus dMW'")
        try:
            events.append(Disturbance(float(parts[0]), int(parts[1]), float(parts[2])))
        except ValueError as exc:
            raise ScenarioError(f"disturbance entry {item.strip()!r} is malformed") from exc
    return tuple(sorted(events, key=lambda e: e.time))


def parse_scenario(text: str, base_dir: str | os.PathLike = ".", name: str = "scenario") -> ScenarioConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ScenarioError(f"scenario syntax error: {exc}") from exc
    for section in cp.sections():
        if section not in _KEYS:
            raise ScenarioError(f"unknown section [{section}]")
        unknown = set(cp[section]) - _KEYS[section]
        if unknown:
            raise ScenarioError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    for section, keys in _REQUIRED.items():
        for key in keys:
            if not cp.has_option(section, key):
                raise ScenarioError(f"missing required key {key!r} in [{section}]")

    def get(section, key, default=None):
        return cp.get(section, key) if cp.has_option(section, key) else default

    case = get("network", "case")
    if case not in ("ieee14", "builtin:ieee14") and not os.path.isabs(case):
        case = os.path.join(base_dir, case)
    net = build_matrices(load_case(case))
    base = net.spec.base_mva
    n_g, n, m = net.n_g, net.n, net.m

    Q = _sized(get("dispatch", "q"), n_g, "Q")
    u_ref = _sized(get("dispatch", "u_ref"), n_g, "u_ref") / base
    u_lo = _sized(get("dispatch", "u_lo", "0"), n_g, "u_lo") / base
    u_hi = _sized(get("dispatch", "u_hi", "1e6"), n_g, "u_hi") / base
    d = _sized(get("dispatch", "d"), n, "d") / base
    p_sch = _sized(get("dispatch", "p_sch", "0"), net.n_t, "P_sch") / base if net.n_t else np.zeros(0)
    margin = get("dispatch", "flow_margin")
    alias = get("dispatch", "f_hi_margin")
    if margin is not None and alias is not None:
        raise ScenarioError("give either flow_margin or f_hi_margin, not both")
    margin = margin if margin is not None else alias
    if margin is not None:
        flows = base_flows(net, u_ref, d)
        f_hi = flows + float(margin) / base
        f_lo = flows - float(margin) / base
    else:
        f_hi, f_lo = np.full(m, 1e6), np.full(m, -1e6)
    if get("dispatch", "f_hi") is not None:
        f_hi = _line_values(get("dispatch", "f_hi"), net, f_hi, base, "f_hi")
    if get("dispatch", "f_lo") is not None:
        f_lo = _line_values(get("dispatch", "f_lo"), net, f_lo, base, "f_lo")
    try:
        problem = DispatchProblem(net, Q, u_ref, d, p_sch, f_lo, f_hi, u_lo, u_hi)
        plant = PlantParams(_sized(get("plant", "inertia", "0.2"), n, "inertia"),
                            _sized(get("plant", "damping", "0.05"), n, "damping"))
        tau_rho = _sized(get("controller", "tau_rho", "0.02"), m, "tau_rho")
        gains = ControllerGains(
            tau_u=_sized(get("controller", "tau_u", "0.5"), n_g, "tau_u"),
            tau_phi=_sized(get("controller", "tau_phi", "30"), n, "tau_phi"),
            tau_lambda=_sized(get("controller", "tau_lambda", "0.07"), n, "tau_lambda"),
            tau_pi=_sized(get("controller", "tau_pi", "0.15"), max(net.n_t, 1), "tau_pi")[:net.n_t],
            tau_plus=tau_rho, tau_minus=tau_rho,
            kappa=float(get("controller", "kappa", "1.0")))
    except ValueError as exc:
        raise ScenarioError(str(exc)) from exc

    epsilon = float(get("rbc", "epsilon", "0.0006"))
    layout = StateLayout(n_g, n, net.n_t, m)
    part_name = get("rbc", "partition", "default").strip()
    if part_name == "default":
        partition = default_partition(n_g, n, net.n_t, m)
    elif part_name == "singleton":
        partition = singleton_partition(layout.size)
    else:
        raise ScenarioError(f"unknown partition {part_name!r}")
    probs = get("rbc", "probs", "uniform").strip()
    if probs != "uniform":
        weights = _floats(probs, "probs")
        if weights.size != partition.n_b or np.any(weights <= 0):
            raise ScenarioError(f"probs needs {partition.n_b} positive weights")
        partition = BlockPartition(partition.blocks, weights / weights.sum(), partition.name)
    step = get("sim", "step")
    try:
        channel = WaveChannelConfig(
            eta=float(get("channel", "eta", "1.0")),
            delay_down=float(get("channel", "delay_down_ms", "11")) / 1e3,
            delay_up=float(get("channel", "delay_up_ms", "11")) / 1e3,
            filter_enabled=_flag(get("channel", "filter", "off"), "filter"),
            zeta_u=float(get("channel", "zeta_u_ms", "10")) / 1e3,
            zeta_omega=float(get("channel", "zeta_omega_ms", "20")) / 1e3,
            step=epsilon)
        rbc = RbcConfig(epsilon, int(get("rbc", "seed", "0")), partition)
    except ValueError as exc:
        raise ScenarioError(str(exc)) from exc
    return ScenarioConfig(
        name=name, net=net, problem=problem, plant=plant, gains=gains, channel=channel,
        rbc=rbc, rbc_enabled=_flag(get("rbc", "enabled", "off"), "enabled"),
        disturbances=_events(get("disturbance", "events", "")),
        horizon=float(get("sim", "horizon", "300")),
        step=None if step is None else float(step),
        record_every=int(get("sim", "record_every", "50")),
        init=get("controller", "init", "warm").strip())


def load_scenario(path: str | os.PathLike) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    name = os.path.splitext(os.path.basename(str(path)))[0]
    return parse_scenario(text, base_dir=os.path.dirname(os.path.abspath(path)), name=name)


def builtin_scenario(name: str = "ieee14") -> ScenarioConfig:
    if name != "ieee14":
        raise ScenarioError(f"unknown builtin scenario {name!r}")
    from freqnet.builtin import IEEE14_SCENARIO
    return parse_scenario(IEEE14_SCENARIO, name="ieee14")
