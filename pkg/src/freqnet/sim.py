"""Closed-loop orchestration: plant, wave channels and optimizer on one clock.

Each step ``k`` (time ``t_k = k h``) does, in order:

1. read the received waves ``sigma_p-`` and ``sigma_o-`` from the channel;
2. decode the plant input ``p`` and advance the plant one step;
3. decode the measurement ``y`` and advance the optimizer one step (projected
   Euler, or one RBC block update);
4. encode the outgoing waves from ``(p, omega_{k+1})`` and ``(u_{k+1}, y)``
   and push them into the delay lines.

Decoding in steps 2 and 3 uses the post-step port values, which makes
``p`` and ``y`` the solution of a small per-unit linear (respectively
clipped-linear) equation; see :func:`freqnet.interface.couple_plant_port`.

Two implementations share these semantics: :func:`run_reference` strings the
module-level functions together in plain numpy and is meant for
cross-checks and short runs; :func:`run_closed_loop` runs a compiled kernel
and is what the commands and the acceptance suite use.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from freqnet.controller import (
    ControllerGains,
    StateLayout,
    OptimizerState,
    generation_drive,
    optimizer_derivative,
    optimizer_storage,
    project_feasible,
    step_optimizer_projected_euler,
)
from freqnet.dispatch import DispatchProblem, KKTPoint, solve_dispatch_oracle
from freqnet.interface import (
    channel_peek,
    channel_step,
    channel_storage,
    couple_optimizer_port,
    couple_plant_port,
    encode_optimizer_wave,
    encode_plant_wave,
    init_channel,
)
from freqnet.plant import PlantParams, PlantState, plant_derivative, plant_storage, step_plant
from freqnet.rbc import RNG_ALGORITHM, make_rng, rbc_block_step, sample_blocks
from freqnet.scenario import ScenarioConfig, apply_disturbance

__all__ = [
    "ScenarioConfig",
    "SimulationDiverged",
    "SegmentReference",
    "SimTrace",
    "DissipationReport",
    "ChannelBalanceReport",
    "MsDecayEstimate",
    "apply_disturbance",
    "segment_references",
    "dissipation_constant",
    "distance_to_solution",
    "run_closed_loop",
    "run_continuous",
    "run_rbc",
    "run_reference",
    "run_to_convergence",
    "terminal_stationarity",
    "monitor_dissipation",
    "calibrate_dissipation_constant",
    "channel_energy_balance",
    "calibrate_balance_constant",
    "estimate_ms_decay",
    "equilibrium_scenario",
    "phi_bound_constant",
    "phi_bound_ratio",
    "DIVERGENCE_LIMIT",
]

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6
# stepped loops clip after each step, so only exact bounds block a velocity
STEP_TOL = 0.0


class SimulationDiverged(RuntimeError):
    def __init__(self, time: float):
        super().__init__(f"closed loop diverged (state norm above {DIVERGENCE_LIMIT:g}) at t = {time:.4f} s")
        self.time = time


@dataclass(frozen=True, eq=False)
class SegmentReference:
    """Oracle solution for one piece of the piecewise-constant demand."""

    start_step: int
    d: np.ndarray
    point: KKTPoint
    z_star: np.ndarray
    wave: np.ndarray        # equilibrium wave u*/sqrt(2 eta), both directions


def _event_step(time: float, h: float) -> int:
    # first step whose sampling instant is at or after the event
    return int(math.ceil(time / h - 1e-9))


def segment_references(scenario: ScenarioConfig) -> list[SegmentReference]:
    """Demand segments of the run and their oracle solutions."""
    h = scenario.h
    steps = sorted({_event_step(ev.time, h) for ev in scenario.disturbances})
    starts = [0] + [k for k in steps if 0 < k < scenario.n_steps]
    c = math.sqrt(2.0 * scenario.channel.eta)
    refs, cache = [], {}
    for k in starts:
        d = scenario.demand_at(k * h)
        key = d.tobytes()
        if key not in cache:
            cache[key] = solve_dispatch_oracle(scenario.problem.with_demand(d))
        point = cache[key]
        refs.append(SegmentReference(k, d, point, OptimizerState.from_kkt(point).flat(),
                                     point.u / c))
    return refs


def dissipation_constant(plant: PlantParams, problem: DispatchProblem, gains: ControllerGains) -> float:
    """``c0 = min(lambda_min(D), m_J, kappa)``."""
    return float(min(plant.D.min(), problem.m_J, gains.kappa))


def distance_to_solution(theta, omega, z, reference: KKTPoint, layout: StateLayout):
    """Distance to the solution set over ``(omega, theta, u, phi)``; duals excluded.

    ``theta`` is compared with ``phi*`` after removing its mean, since the
    common angle is not pinned by the dynamics.
    """
    theta = np.asarray(theta, float)
    dth = theta - theta.mean(axis=-1, keepdims=True) - reference.phi
    z = np.asarray(z, float)
    du = z[..., layout.u] - reference.u
    dphi = z[..., layout.phi] - reference.phi
    total = (np.sum(np.asarray(omega, float) ** 2, axis=-1) + np.sum(dth ** 2, axis=-1)
             + np.sum(du ** 2, axis=-1) + np.sum(dphi ** 2, axis=-1))
    return np.sqrt(total)


# -- trace ---------------------------------------------------------------------

@dataclass(eq=False)
class SimTrace:
    """Recorded samples of one run (per-unit unless a name says MW).

    ``S_ch`` is the channel storage (line energy plus filter energy when the
    filters are on). ``diss`` is the running integral of
    ``|omega|^2 + |u - u*|^2 + |r|^2`` (without the factor ``c0``), and
    ``segment`` the index of the demand segment in force over the steps
    leading to each sample. ``ch_supply`` integrates the power delivered
    into the channel ports, ``-(G^T omega)^T (p - u*) + (u - u*)^T y``, and
    ``ch_loss`` the filter loss ``1/2 |a - sigma-|^2`` summed over both
    directions.
    """

    t: np.ndarray
    theta: np.ndarray
    omega: np.ndarray
    z: np.ndarray
    p: np.ndarray
    y: np.ndarray
    S_p: np.ndarray
    S_o: np.ndarray
    S_ch: np.ndarray
    gamma2: np.ndarray
    diss: np.ndarray
    segment: np.ndarray
    layout: StateLayout
    ch_supply: np.ndarray | None = None
    ch_loss: np.ndarray | None = None
    meta: dict = field(default_factory=dict)
    references: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.t.size

    def block(self, name: str) -> np.ndarray:
        return self.z[:, getattr(self.layout, name)]

    @property
    def u(self) -> np.ndarray:
        return self.block("u")

    @property
    def phi(self) -> np.ndarray:
        return self.block("phi")

    @property
    def storage(self) -> np.ndarray:
        return self.S_p + self.S_o + self.S_ch

    def final_point(self) -> KKTPoint:
        st = OptimizerState.from_flat(self.layout, self.z[-1])
        return KKTPoint(st.u, st.phi, st.lam, st.pi, st.rho_plus, st.rho_minus)


def _empty_trace(n_rec, n, nz, n_g, layout):
    return SimTrace(t=np.zeros(n_rec), theta=np.zeros((n_rec, n)), omega=np.zeros((n_rec, n)),
                    z=np.zeros((n_rec, nz)), p=np.zeros((n_rec, n_g)), y=np.zeros((n_rec, n_g)),
                    S_p=np.zeros(n_rec), S_o=np.zeros(n_rec), S_ch=np.zeros(n_rec),
                    gamma2=np.zeros(n_rec), diss=np.zeros(n_rec),
                    segment=np.zeros(n_rec, dtype=np.int64), layout=layout,
                    ch_supply=np.zeros(n_rec), ch_loss=np.zeros(n_rec))


def _record_count(n_steps: int, every: int) -> int:
    return 1 + n_steps // every + (1 if n_steps % every else 0)


# -- initial state ---------------------------------------------------------------

def _initial(scenario: ScenarioConfig, refs):
    net, layout = scenario.net, scenario.layout
    if scenario.init == "warm":
        point = refs[0].point
        theta = point.phi.copy()
        z = refs[0].z_star.copy()
        wave = refs[0].wave
    else:
        theta = np.zeros(net.n)
        z = project_feasible(scenario.problem, np.zeros(layout.size), layout)
        wave = np.zeros(net.n_g)
    return PlantState(theta, np.zeros(net.n)), z, init_channel(scenario.channel, wave)


def _storages(scenario, ref, plant_state, z, channel_state):
    sp = plant_storage(scenario.plant, scenario.net, plant_state, ref.point.phi)
    so = optimizer_storage(scenario.gains, z, ref.z_star, scenario.layout)
    sc = channel_storage(channel_state, scenario.channel, ref.wave)
    return float(sp), float(so), float(sc)


def _fill_record(trace, i, t, plant_state, z, p, y, storages, ref, diss, seg, layout):
    trace.t[i] = t
    trace.theta[i] = plant_state.theta
    trace.omega[i] = plant_state.omega
    trace.z[i] = z
    trace.p[i] = p
    trace.y[i] = y
    trace.S_p[i], trace.S_o[i], trace.S_ch[i] = storages
    trace.gamma2[i] = distance_to_solution(plant_state.theta, plant_state.omega, z, ref.point, layout) ** 2
    trace.diss[i] = diss
    trace.segment[i] = seg


def _prestep_ports(scenario, plant_state, z, channel_state):
    """Decode relations at the current (pre-step) state, for the first sample."""
    eta = scenario.channel.eta
    c = math.sqrt(2.0 * eta)
    sp, so = channel_peek(channel_state, scenario.channel)
    gw = plant_state.omega[scenario.net.gen_buses]
    u = z[scenario.layout.u]
    return c * sp - eta * gw, (u - c * so) / eta


def _check_delays(scenario):
    if scenario.channel.steps_down < 1 or scenario.channel.steps_up < 1:
        raise ValueError("closed-loop runs need delays of at least one step in each direction "
                         f"(h = {scenario.h:g} s)")


def _draw_betas(scenario: ScenarioConfig) -> np.ndarray:
    if not scenario.rbc_enabled:
        return np.zeros(0, dtype=np.int64)
    rng = make_rng(scenario.rbc.seed)
    return sample_blocks(rng, scenario.rbc.partition.probs, scenario.n_steps).astype(np.int64)


def _meta(scenario, refs, betas):
    ch = scenario.channel
    part = scenario.rbc.partition
    meta = {
        "scenario": scenario.name,
        "mode": "rbc" if scenario.rbc_enabled else "continuous",
        "scheme": "projected-euler+semi-implicit-plant+post-step-port-pairing",
        "h": scenario.h,
        "horizon": scenario.horizon,
        "steps": scenario.n_steps,
        "record_every": scenario.record_every,
        "eta": ch.eta,
        "filter": "on" if ch.filter_enabled else "off",
        "delay_down_eff": ch.effective_delays[0],
        "delay_up_eff": ch.effective_delays[1],
        "delay_steps": f"{ch.steps_down}/{ch.steps_up}",
        "n_z": scenario.layout.size,
        "c0": dissipation_constant(scenario.plant, scenario.problem, scenario.gains),
        "base_mva": scenario.base_mva,
        "init": scenario.init,
    }
    if ch.filter_enabled:
        meta["zeta_u"], meta["zeta_omega"] = ch.zeta_u, ch.zeta_omega
    if scenario.rbc_enabled:
        sizes = part.sizes
        meta.update({
            "seed": scenario.rbc.seed,
            "rng": RNG_ALGORITHM,
            "partition": part.name,
            "n_blocks": part.n_b,
            "epsilon": scenario.rbc.epsilon,
            "blocks_drawn": int(betas.size),
            "coords_written": int(sizes[betas].sum()),
            "expected_coords_per_step": part.expected_coords_per_step,
        })
    else:
        meta.update({"blocks_drawn": scenario.n_steps, "coords_written": scenario.n_steps * scenario.layout.size})
    return meta


# -- compiled kernel -------------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _kernel(n_steps, h, L, K, T, TK, gen, Mv, Dv, Q, uref, ulo, uhi, psch, flo, fhi,
            tau, kappa, lay, eta, filt, alpha_d, alpha_u, zeta_u, zeta_w,
            seg_start, seg_d, ref_phi, ref_z, ref_wave,
            rbc, eps, blk_idx, blk_off, probs, betas,
            theta, omega, z, buf_d, buf_u, heads, filt_d, filt_u,
            every, rec_t, rec_theta, rec_omega, rec_z, rec_p, rec_y, rec_S, rec_g2, rec_diss,
            rec_seg, rec_ch, ch_min, tol, limit):
    n = theta.shape[0]
    ng = gen.shape[0]
    m = K.shape[0]
    nt = TK.shape[0]
    iu, iphi, ilam, ipi, irp, irm, nz = lay[0], lay[1], lay[2], lay[3], lay[4], lay[5], lay[6]
    c = math.sqrt(2.0 * eta)
    nd = buf_d.shape[0]
    nu = buf_u.shape[0]
    hd = heads[0]
    hu = heads[1]
    nseg = seg_start.shape[0]
    s = 0
    Lth = np.empty(n)
    wn = np.empty(n)
    r = np.empty(n)
    lm = np.empty(m)
    f = np.empty(nz)
    scale = np.empty(nz)
    sp = np.empty(ng)
    so = np.empty(ng)
    p = np.empty(ng)
    y = np.empty(ng)
    diss = 0.0
    supply = 0.0
    fdiss = 0.0
    rec = 1
    for k in range(n_steps):
        while s + 1 < nseg and k >= seg_start[s + 1]:
            s += 1
        # 1. received waves
        for j in range(ng):
            a_d = buf_d[hd, j]
            a_u = buf_u[hu, j]
            if filt:
                sp[j] = alpha_d * filt_d[j] + (1.0 - alpha_d) * a_d
                so[j] = alpha_u * filt_u[j] + (1.0 - alpha_u) * a_u
            else:
                sp[j] = a_d
                so[j] = a_u
        # balance residual and dissipation integrand at the pre-step state
        for i in range(n):
            acc = -seg_d[s, i]
            for q in range(n):
                acc -= L[i, q] * z[iphi + q]
            r[i] = acc
        for j in range(ng):
            r[gen[j]] += z[iu + j]
        integrand = 0.0
        for i in range(n):
            integrand += omega[i] * omega[i] + r[i] * r[i]
        for j in range(ng):
            du = z[iu + j] - ref_z[s, iu + j]
            integrand += du * du
        diss += h * integrand
        # 2. plant, input paired with the post-step frequency
        for i in range(n):
            acc = 0.0
            for q in range(n):
                acc += L[i, q] * theta[q]
            Lth[i] = acc
        for i in range(n):
            wn[i] = omega[i] + h * (-Dv[i] * omega[i] - Lth[i] - seg_d[s, i]) / Mv[i]
        for j in range(ng):
            g = gen[j]
            p[j] = (c * sp[j] - eta * wn[g]) / (1.0 + eta * h / Mv[g])
            wn[g] += h * p[j] / Mv[g]
        for i in range(n):
            omega[i] = wn[i]
            theta[i] += h * wn[i]
        # 3. optimizer
        touches_phi = True
        if rbc:
            for q in range(nz):
                scale[q] = 0.0
            beta = betas[k]
            st = eps / probs[beta]
            touches_phi = False
            for q in range(blk_off[beta], blk_off[beta + 1]):
                idx = blk_idx[q]
                scale[idx] = st
                if iphi <= idx < ilam:
                    touches_phi = True
        else:
            for q in range(nz):
                scale[q] = h
        for j in range(ng):
            g = gen[j]
            uj = z[iu + j]
            drive = -Q[j] * (uj - uref[j]) - z[ilam + g] - kappa * r[g]
            b = scale[iu + j] / tau[iu + j]
            sv = c * so[j]
            yy = (uj + b * drive - sv) / (eta + b)
            un = uj + b * drive - b * yy
            un = min(max(un, ulo[j]), uhi[j])
            y[j] = (un - sv) / eta
            v = drive - y[j]
            if (uj <= ulo[j] + tol and v < 0.0) or (uj >= uhi[j] - tol and v > 0.0):
                v = 0.0
            f[iu + j] = v / tau[iu + j]
        for l in range(m):
            acc = z[irp + l] - z[irm + l]
            for t in range(nt):
                acc += T[t, l] * z[ipi + t]
            lm[l] = acc
        for i in range(n):
            acc = 0.0
            for q in range(n):
                acc += L[i, q] * (z[ilam + q] + kappa * r[q])
            for l in range(m):
                acc -= K[l, i] * lm[l]
            f[iphi + i] = acc / tau[iphi + i]
            f[ilam + i] = r[i] / tau[ilam + i]
        for t in range(nt):
            acc = -psch[t]
            for i in range(n):
                acc += TK[t, i] * z[iphi + i]
            f[ipi + t] = acc / tau[ipi + t]
        for l in range(m):
            flow = 0.0
            for i in range(n):
                flow += K[l, i] * z[iphi + i]
            vp = flow - fhi[l]
            vm = flo[l] - flow
            if z[irp + l] <= tol and vp < 0.0:
                vp = 0.0
            if z[irm + l] <= tol and vm < 0.0:
                vm = 0.0
            f[irp + l] = vp / tau[irp + l]
            f[irm + l] = vm / tau[irm + l]
        for q in range(nz):
            z[q] += scale[q] * f[q]
        for j in range(ng):
            z[iu + j] = min(max(z[iu + j], ulo[j]), uhi[j])
        if touches_phi:
            mean = 0.0
            for i in range(n):
                mean += z[iphi + i]
            mean /= n
            for i in range(n):
                z[iphi + i] -= mean
        for l in range(m):
            z[irp + l] = max(z[irp + l], 0.0)
            z[irm + l] = max(z[irm + l], 0.0)
        # 4. encode and push; channel supply and filter loss for the energy ledger
        step_supply = 0.0
        step_loss = 0.0
        for j in range(ng):
            ustar = ref_z[s, iu + j]
            step_supply += -omega[gen[j]] * (p[j] - ustar) + (z[iu + j] - ustar) * y[j]
            if filt:
                e_d = buf_d[hd, j] - sp[j]
                e_u = buf_u[hu, j] - so[j]
                step_loss += 0.5 * (e_d * e_d + e_u * e_u)
        supply += h * step_supply
        fdiss += h * step_loss
        if step_loss < ch_min[0]:
            ch_min[0] = step_loss
        for j in range(ng):
            buf_d[hd, j] = (z[iu + j] + eta * y[j]) / c
            buf_u[hu, j] = (p[j] - eta * omega[gen[j]]) / c
            if filt:
                filt_d[j] = sp[j]
                filt_u[j] = so[j]
        hd = (hd + 1) % nd
        hu = (hu + 1) % nu

        bad = False
        if (k & 63) == 0 or k == n_steps - 1:
            for i in range(n):
                if not (abs(omega[i]) <= limit and abs(theta[i]) <= limit):
                    bad = True
            for q in range(nz):
                if not abs(z[q]) <= limit:
                    bad = True
        if bad:
            heads[0] = hd
            heads[1] = hu
            return 1, k + 1, rec, diss

        if (k + 1) % every == 0 or k == n_steps - 1:
            rec_t[rec] = (k + 1) * h
            for i in range(n):
                rec_theta[rec, i] = theta[i]
                rec_omega[rec, i] = omega[i]
            for q in range(nz):
                rec_z[rec, q] = z[q]
            for j in range(ng):
                rec_p[rec, j] = p[j]
                rec_y[rec, j] = y[j]
            # storages about the equilibrium of the segment just used
            s_p = 0.0
            for i in range(n):
                s_p += 0.5 * Mv[i] * omega[i] * omega[i]
            # centred so the common-mode drift of theta does not cancel in L
            dmean = 0.0
            for i in range(n):
                dmean += theta[i] - ref_phi[s, i]
            dmean /= n
            for i in range(n):
                Lth[i] = theta[i] - ref_phi[s, i] - dmean
            for i in range(n):
                acc = 0.0
                for q in range(n):
                    acc += L[i, q] * Lth[q]
                s_p += 0.5 * Lth[i] * acc
            s_o = 0.0
            for q in range(nz):
                dz = z[q] - ref_z[s, q]
                s_o += 0.5 * tau[q] * dz * dz
            s_c = 0.0
            for e in range(nd):
                for j in range(ng):
                    dw = buf_d[e, j] - ref_wave[s, j]
                    s_c += 0.5 * h * dw * dw
            for e in range(nu):
                for j in range(ng):
                    dw = buf_u[e, j] - ref_wave[s, j]
                    s_c += 0.5 * h * dw * dw
            if filt:
                for j in range(ng):
                    dd = filt_d[j] - ref_wave[s, j]
                    dv = filt_u[j] - ref_wave[s, j]
                    s_c += 0.5 * zeta_u * dd * dd + 0.5 * zeta_w * dv * dv
            rec_S[rec, 0] = s_p
            rec_S[rec, 1] = s_o
            rec_S[rec, 2] = s_c
            mean = 0.0
            for i in range(n):
                mean += theta[i]
            mean /= n
            g2 = 0.0
            for i in range(n):
                dth = theta[i] - mean - ref_phi[s, i]
                dph = z[iphi + i] - ref_phi[s, i]
                g2 += omega[i] * omega[i] + dth * dth + dph * dph
            for j in range(ng):
                du = z[iu + j] - ref_z[s, iu + j]
                g2 += du * du
            rec_g2[rec] = g2
            rec_diss[rec] = diss
            rec_seg[rec] = s
            rec_ch[rec, 0] = supply
            rec_ch[rec, 1] = fdiss
            rec += 1
    heads[0] = hd
    heads[1] = hu
    return 0, n_steps, rec, diss


def run_closed_loop(scenario: ScenarioConfig) -> SimTrace:
    """Run the scenario with the compiled kernel (continuous or RBC per the scenario)."""
    _check_delays(scenario)
    net, layout, problem, gains = scenario.net, scenario.layout, scenario.problem, scenario.gains
    ch = scenario.channel
    refs = segment_references(scenario)
    plant_state, z, chan = _initial(scenario, refs)
    betas = _draw_betas(scenario)
    n_steps, every = scenario.n_steps, scenario.record_every
    trace = _empty_trace(_record_count(n_steps, every), net.n, layout.size, net.n_g, layout)
    trace.meta = _meta(scenario, refs, betas)
    trace.references = refs
    p0, y0 = _prestep_ports(scenario, plant_state, z, chan)
    _fill_record(trace, 0, 0.0, plant_state, z, p0, y0,
                 _storages(scenario, refs[0], plant_state, z, chan), refs[0], 0.0, 0, layout)

    theta = plant_state.theta.copy()
    omega = plant_state.omega.copy()
    z = z.copy()
    heads = np.array([chan.head_down, chan.head_up], dtype=np.int64)
    lay = np.array([layout.u.start, layout.phi.start, layout.lam.start, layout.pi.start,
                    layout.rho_plus.start, layout.rho_minus.start, layout.size], dtype=np.int64)
    blk_idx, blk_off = scenario.rbc.partition.flat_arrays()
    S = np.zeros((len(trace), 3))
    ledger = np.zeros((len(trace), 2))
    ch_min = np.array([np.inf])
    status, done, n_rec, _ = _kernel(
        n_steps, scenario.h, net.L, net.K, net.T.reshape(net.n_t, net.m), net.T @ net.K,
        net.gen_buses.astype(np.int64), scenario.plant.M, scenario.plant.D,
        problem.Q, problem.u_ref, problem.u_lo, problem.u_hi, problem.p_sch, problem.f_lo,
        problem.f_hi, gains.tau_vector(layout), float(gains.kappa), lay, float(ch.eta),
        bool(ch.filter_enabled), ch.alpha_down, ch.alpha_up, float(ch.zeta_u), float(ch.zeta_omega),
        np.array([ref.start_step for ref in refs], dtype=np.int64),
        np.array([ref.d for ref in refs]), np.array([ref.point.phi for ref in refs]),
        np.array([ref.z_star for ref in refs]), np.array([ref.wave for ref in refs]),
        bool(scenario.rbc_enabled), float(scenario.rbc.epsilon), blk_idx, blk_off,
        scenario.rbc.partition.probs, betas,
        theta, omega, z, chan.buf_down, chan.buf_up, heads, chan.filt_down, chan.filt_up,
        every, trace.t, trace.theta, trace.omega, trace.z, trace.p, trace.y, S,
        trace.gamma2, trace.diss, trace.segment, ledger, ch_min, STEP_TOL, DIVERGENCE_LIMIT)
    if status:
        raise SimulationDiverged(done * scenario.h)
    trace.S_p, trace.S_o, trace.S_ch = S[:, 0].copy(), S[:, 1].copy(), S[:, 2].copy()
    trace.ch_supply, trace.ch_loss = ledger[:, 0].copy(), ledger[:, 1].copy()
    trace.meta["min_step_filter_loss"] = float(ch_min[0]) if n_steps else 0.0
    return trace


def run_continuous(scenario: ScenarioConfig) -> SimTrace:
    """Continuous-reference run: every coordinate moves by projected Euler each step."""
    if scenario.rbc_enabled:
        scenario = scenario.with_overrides(rbc=False)
    return run_closed_loop(scenario)


def run_rbc(scenario: ScenarioConfig, seed: int | None = None) -> SimTrace:
    """RBC run at ``h = epsilon``: one randomly drawn block moves per step."""
    return run_closed_loop(scenario.with_overrides(rbc=True, seed=seed))


def terminal_stationarity(scenario: ScenarioConfig, trace: SimTrace) -> float:
    """Largest of ``|omega|`` and the optimizer velocity at the last sample.

    Uses only the closed loop's own quantities (no oracle), so it can decide
    when a run has settled before the result is compared with the oracle.
    """
    d = scenario.demand_at(trace.t[-1])
    problem = scenario.problem.with_demand(d)
    f = optimizer_derivative(problem, scenario.gains, trace.z[-1], trace.y[-1], tol=0.0)
    return float(max(np.abs(trace.omega[-1]).max(), np.abs(f).max()))


def run_to_convergence(scenario: ScenarioConfig, tol: float = 1e-9,
                       max_horizon: float = 12800.0) -> tuple[SimTrace, bool]:
    """Run, doubling the horizon until :func:`terminal_stationarity` is below ``tol``.

    Returns the last trace and whether it settled within ``max_horizon``.
    """
    horizon = scenario.horizon
    while True:
        trace = run_closed_loop(scenario.with_overrides(horizon=horizon))
        if terminal_stationarity(scenario, trace) < tol:
            return trace, True
        if horizon >= max_horizon:
            return trace, False
        horizon = min(2.0 * horizon, max_horizon)


# -- reference loop ----------------------------------------------------------------

def run_reference(scenario: ScenarioConfig, n_steps: int | None = None) -> SimTrace:
    """Same closed loop written with the module-level functions only.

    Slow (tens of microseconds per step); intended for cross-checking the
    compiled kernel on short horizons.
    """
    _check_delays(scenario)
    net, layout, gains = scenario.net, scenario.layout, scenario.gains
    ch, eta, h = scenario.channel, scenario.channel.eta, scenario.h
    if n_steps is not None:
        scenario = scenario.with_overrides(horizon=n_steps * h)
    n_steps = scenario.n_steps
    refs = segment_references(scenario)
    problems = [scenario.problem.with_demand(ref.d) for ref in refs]
    plant_state, z, chan = _initial(scenario, refs)
    betas = _draw_betas(scenario)
    every = scenario.record_every
    trace = _empty_trace(_record_count(n_steps, every), net.n, layout.size, net.n_g, layout)
    trace.meta = _meta(scenario, refs, betas)
    trace.references = refs
    p, y = _prestep_ports(scenario, plant_state, z, chan)
    _fill_record(trace, 0, 0.0, plant_state, z, p, y,
                 _storages(scenario, refs[0], plant_state, z, chan), refs[0], 0.0, 0, layout)
    gen = net.gen_buses
    gain = h / scenario.plant.M[gen]
    tau_u = np.broadcast_to(gains.tau_u, (net.n_g,))
    part = scenario.rbc.partition
    seg, diss, rec = 0, 0.0, 1
    supply, loss, loss_min = 0.0, 0.0, np.inf
    for k in range(n_steps):
        while seg + 1 < len(refs) and k >= refs[seg + 1].start_step:
            seg += 1
        ref, prob = refs[seg], problems[seg]
        sigma_p_minus, sigma_o_minus = channel_peek(chan, ch)
        u = z[layout.u]
        r = prob.net.G @ u - prob.d - prob.net.L @ z[layout.phi]
        diss += h * (plant_state.omega @ plant_state.omega + (u - ref.point.u) @ (u - ref.point.u) + r @ r)

        _, wdot_free = plant_derivative(scenario.plant, net, plant_state, np.zeros(net.n_g), ref.d)
        gw_free = (plant_state.omega + h * wdot_free)[gen]
        p = couple_plant_port(sigma_p_minus, gw_free, gain, eta)
        plant_state = step_plant(scenario.plant, net, plant_state, p, ref.d, h)

        if scenario.rbc_enabled:
            beta = int(betas[k])
            step_u = np.zeros(net.n_g)
            in_blk = np.isin(np.arange(layout.size)[layout.u], part.blocks[beta])
            step_u[in_blk] = scenario.rbc.epsilon / part.probs[beta]
        else:
            step_u = np.full(net.n_g, h)
        b = step_u / tau_u
        u_free = u + b * generation_drive(prob, gains, z)
        y, _ = couple_optimizer_port(u_free, b, prob.u_lo, prob.u_hi, sigma_o_minus, eta)
        if scenario.rbc_enabled:
            z = rbc_block_step(prob, gains, z, y, scenario.rbc.epsilon, part, beta)
        else:
            z = step_optimizer_projected_euler(prob, gains, z, y, h)

        sigma_p_plus, _ = encode_plant_wave(p, plant_state.omega[gen], eta)
        sigma_o_plus, _ = encode_optimizer_wave(z[layout.u], y, eta)
        channel_step(chan, ch, sigma_o_plus, sigma_p_plus)
        u_star = ref.point.u
        supply += h * (-(plant_state.omega[gen] @ (p - u_star)) + (z[layout.u] - u_star) @ y)
        step_loss = 0.0
        if ch.filter_enabled:
            step_loss = 0.5 * (np.sum((chan.arrived_down - sigma_p_minus) ** 2)
                               + np.sum((chan.arrived_up - sigma_o_minus) ** 2))
        loss += h * step_loss
        loss_min = min(loss_min, step_loss)

        state_max = max(np.abs(plant_state.omega).max(), np.abs(plant_state.theta).max(), np.abs(z).max())
        if not state_max <= DIVERGENCE_LIMIT:
            raise SimulationDiverged((k + 1) * h)
        if (k + 1) % every == 0 or k == n_steps - 1:
            _fill_record(trace, rec, (k + 1) * h, plant_state, z, p, y,
                         _storages(scenario, ref, plant_state, z, chan), ref, diss, seg, layout)
            trace.ch_supply[rec], trace.ch_loss[rec] = supply, loss
            rec += 1
    trace.meta["min_step_filter_loss"] = float(loss_min) if n_steps else 0.0
    return trace


# -- monitors ----------------------------------------------------------------------

@dataclass(frozen=True)
class DissipationReport:
    c0: float
    tol: float
    n_checked: int
    n_violations: int
    max_excess: float       # largest dS/dt + c0 * integrand over the checked intervals
    skipped: int            # intervals straddling a demand change

    @property
    def violation_rate(self) -> float:
        return self.n_violations / self.n_checked if self.n_checked else 0.0


def monitor_dissipation(trace: SimTrace, problem: DispatchProblem | None = None,
                        gains: ControllerGains | None = None, tol: float = 0.0,
                        c0: float | None = None) -> DissipationReport:
    """Check ``dS/dt <= -c0 (|omega|^2 + |u - u*|^2 + |r|^2) + tol`` between samples.

    Differences are taken between consecutive samples that share a demand
    segment; the right-hand side integrates the bracket over the same steps.
    ``c0`` defaults to the value stored with the trace, which was computed
    from the plant damping, ``problem.m_J`` and ``gains.kappa``.

    Each interval also gets a rounding allowance of ``64 eps max(S) / dt``,
    the resolution of the storage difference itself; without it a state
    sitting at equilibrium would register violations of order ``1e-14``.
    """
    if c0 is None:
        c0 = float(trace.meta["c0"])
        if problem is not None and gains is not None:
            c0 = min(c0, problem.m_J, gains.kappa)
    S = trace.storage
    dt = np.diff(trace.t)
    same = trace.segment[1:] == trace.segment[:-1]
    rate = np.diff(S) / dt + c0 * np.diff(trace.diss) / dt
    scale = np.maximum(np.abs(S[1:]), np.abs(S[:-1]))
    allowance = 64 * np.finfo(float).eps * scale / dt
    excess = (rate - allowance)[same]
    viol = int(np.count_nonzero(excess > tol))
    return DissipationReport(c0=c0, tol=tol, n_checked=int(excess.size), n_violations=viol,
                             max_excess=float(excess.max()) if excess.size else 0.0,
                             skipped=int(np.count_nonzero(~same)))


@dataclass(frozen=True)
class ChannelBalanceReport:
    n_checked: int
    n_violations: int
    tol: float
    max_residual: float     # largest |dS_ch/dt - supply + loss| over the checked intervals
    max_rate: float         # largest |supply| rate, for scale
    min_step_loss: float    # smallest per-step filter loss (zero when unfiltered)
    skipped: int


def channel_energy_balance(trace: SimTrace, tol: float = 0.0) -> ChannelBalanceReport:
    """Compare the channel storage increments with the port supply ledger.

    Between two samples of one demand segment,
    ``S_ch(t1) - S_ch(t0) = supply - loss`` should hold. Unfiltered, the
    identity is exact step by step because each step moves one wave into
    and one out of every delay line; with filters the storage of the filter
    states matches only to first order in ``h``. An interval violates the
    balance when its residual rate exceeds ``tol`` plus the same rounding
    allowance :func:`monitor_dissipation` uses.
    """
    if trace.ch_supply is None:
        raise ValueError("trace carries no channel ledger")
    dt = np.diff(trace.t)
    same = trace.segment[1:] == trace.segment[:-1]
    lhs = np.diff(trace.S_ch) / dt
    rhs = (np.diff(trace.ch_supply) - np.diff(trace.ch_loss)) / dt
    res = np.abs(lhs - rhs)
    scale = np.maximum(np.abs(trace.S_ch[1:]), np.abs(trace.S_ch[:-1]))
    allowance = 64 * np.finfo(float).eps * scale / dt
    viol = int(np.count_nonzero((res - allowance)[same] > tol))
    res = res[same]
    rate = np.abs(np.diff(trace.ch_supply) / dt)[same]
    return ChannelBalanceReport(int(res.size), viol, tol, float(res.max()) if res.size else 0.0,
                                float(rate.max()) if rate.size else 0.0,
                                float(trace.meta.get("min_step_filter_loss", 0.0)),
                                int(np.count_nonzero(~same)))


def calibrate_balance_constant(scenario: ScenarioConfig, window: float = 15.0, refine: int = 10,
                               safety: float = 2.0) -> float:
    """``C`` of the ``C h`` tolerance of :func:`channel_energy_balance`, from a run at ``h / refine``."""
    h_ref = scenario.h / refine
    fine = scenario.with_overrides(rbc=False, step=h_ref, horizon=min(window, scenario.horizon),
                                   record_every=scenario.record_every * refine)
    return safety * channel_energy_balance(run_closed_loop(fine)).max_residual / h_ref


def calibrate_dissipation_constant(scenario: ScenarioConfig, window: float = 15.0,
                                   refine: int = 10, safety: float = 2.0) -> float:
    """Constant ``C`` of the ``C h`` tolerance, from a run at ``h / refine``.

    The discrete inequality holds up to an ``O(h)`` defect. The reference run
    over the first ``window`` seconds (which covers the disturbances of the
    benchmark) measures that defect at the finer step, and ``C`` is
    ``safety`` times the implied slope. A scheme that satisfies the
    inequality outright gives ``C = 0``.
    """
    h_ref = scenario.h / refine
    fine = scenario.with_overrides(rbc=False, step=h_ref, horizon=min(window, scenario.horizon),
                                   record_every=scenario.record_every * refine)
    report = monitor_dissipation(run_closed_loop(fine))
    return safety * max(report.max_excess, 0.0) / h_ref


@dataclass(frozen=True)
class MsDecayEstimate:
    """Fit of ``log E[gamma_k^2]`` against the step index over a window."""

    per_step: float          # fitted slope per step (negative when decaying)
    per_second: float
    r2: float
    window: tuple
    n_seeds: int
    degenerate: bool
    t: np.ndarray = field(repr=False, default=None)
    mean_gamma2: np.ndarray = field(repr=False, default=None)

    @property
    def contraction(self) -> float:
        """Per-step mean-square contraction factor ``exp(slope)``."""
        return math.exp(self.per_step)


def estimate_ms_decay(scenario: ScenarioConfig, seeds, window: tuple | None = None,
                      transient: float = 10.0, plateau_margin: float = 100.0) -> MsDecayEstimate:
    """Mean-square decay of the RBC loop over several seeds.

    ``window`` is ``(t_start, t_end)`` in seconds. By default it starts
    ``transient`` seconds after the last disturbance and ends once the seed
    mean of ``gamma^2`` comes within ``plateau_margin`` of its terminal
    plateau (the level set by rounding).
    """
    seeds = list(seeds)
    if len(seeds) < 5:
        raise ValueError("mean-square decay needs at least 5 seeds")
    runs = [run_rbc(scenario, seed=s) for s in seeds]
    t = runs[0].t
    mean_g2 = np.mean([tr.gamma2 for tr in runs], axis=0)
    h = scenario.h
    if float(mean_g2.max()) < 1e-24:
        return MsDecayEstimate(0.0, 0.0, 0.0, (0.0, 0.0), len(seeds), True, t, mean_g2)
    if window is None:
        t0 = max([ev.time for ev in scenario.disturbances], default=0.0) + transient
        tail = mean_g2[int(0.9 * t.size):]
        level = plateau_margin * float(tail.min())
        below = np.nonzero((t > t0) & (mean_g2 < level))[0]
        t1 = float(t[below[0]]) if below.size else float(t[-1])
        window = (t0, t1)
    sel = (t >= window[0]) & (t <= window[1]) & (mean_g2 > 0)
    if np.count_nonzero(sel) < 3:
        return MsDecayEstimate(0.0, 0.0, 0.0, tuple(window), len(seeds), True, t, mean_g2)
    x = t[sel] / h
    yv = np.log(mean_g2[sel])
    slope, intercept = np.polyfit(x, yv, 1)
    fit = slope * x + intercept
    ss_res = float(np.sum((yv - fit) ** 2))
    ss_tot = float(np.sum((yv - yv.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return MsDecayEstimate(float(slope), float(slope / h), r2, tuple(window), len(seeds), False,
                           t, mean_g2)


def equilibrium_scenario(scenario: ScenarioConfig) -> ScenarioConfig:
    """Scenario sitting at the post-disturbance equilibrium with no further events."""
    return dataclasses.replace(scenario, problem=scenario.final_problem(),
                               disturbances=(), init="warm")


def phi_bound_constant(net: NetworkMatrices) -> float:
    """``c_phi`` with ``|phi - phi*|^2 <= c_phi (|u - u*|^2 + |r|^2)`` on mean-free angles.

    From ``L (phi - phi*) = G (u - u*) - r`` and ``|L x| >= lambda_2 |x|`` for
    ``x`` orthogonal to the ones vector: ``c_phi = 2 max(|G|^2, 1) / lambda_2^2``.
    """
    lam2 = net.algebraic_connectivity()
    if not lam2 > 0:
        raise ValueError("the angle bound needs a connected network with at least two buses")
    g2 = float(np.linalg.norm(net.G, 2) ** 2) if net.n_g else 0.0
    return 2.0 * max(g2, 1.0) / lam2 ** 2


def phi_bound_ratio(trace: SimTrace, scenario: ScenarioConfig, floor: float = 1e-20) -> float:
    """Largest ``|phi - phi*|^2 / (c_phi (|u - u*|^2 + |r|^2))`` over the samples (at most 1).

    Samples where both sides are below ``floor`` sit at the equilibrium up to
    rounding and are skipped.
    """
    net = scenario.net
    c_phi = phi_bound_constant(net)
    worst = 0.0
    for idx, ref in enumerate(trace.references):
        rows = trace.segment == idx
        if not rows.any():
            continue
        u, phi = trace.u[rows], trace.phi[rows]
        r = u @ net.G.T - ref.d - phi @ net.L
        lhs = np.sum((phi - ref.point.phi) ** 2, axis=1)
        rhs = c_phi * (np.sum((u - ref.point.u) ** 2, axis=1) + np.sum(r * r, axis=1))
        ok = rhs > floor
        if np.any(~ok & (lhs > floor)):
            return math.inf
        if ok.any():
            worst = max(worst, float((lhs[ok] / rhs[ok]).max()))
    return worst
