"""Scattering transform and delayed wave channels between plant and optimizer.

Port variables never cross the channel directly. The plant launches
``sigma_p+`` built from its input ``p`` and the generator frequencies
``G^T omega``; the optimizer launches ``sigma_o+`` built from ``u`` and its
reconstructed measurement ``y``. Each direction is a pure delay, optionally
followed by a unit-DC-gain first-order low-pass filter.

Ring-buffer semantics for a delay of ``d`` steps: the value pushed at step
``k`` is received at step ``k + d``. With ``d >= 1`` the received value at a
step does not depend on what is pushed at that step, which is what lets the
closed loop read the channel before writing to it.

In the sampled loop the port outputs paired with the received waves are the
post-step values ``G^T omega_{k+1}`` and ``u_{k+1}``
(:func:`couple_plant_port`, :func:`couple_optimizer_port`). Pairing with the
pre-step values instead turns each explicit integrator into a slightly
active port near the Nyquist frequency (real part ``-h/2`` per unit gain),
and the lossless delay line then grows that mode by a factor
``1 + eta*h/M + h/(eta*tau_u)`` per round trip.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "WaveChannelConfig",
    "WaveChannelState",
    "encode_plant_wave",
    "encode_optimizer_wave",
    "decode_plant_input",
    "decode_optimizer_measurement",
    "couple_plant_port",
    "couple_optimizer_port",
    "init_channel",
    "channel_peek",
    "channel_step",
    "channel_storage",
    "delay_steps",
]

log = logging.getLogger(__name__)


def _check_eta(eta):
    if not eta > 0:
        raise ValueError("channel impedance eta must be positive")
    return math.sqrt(2.0 * eta)


def encode_plant_wave(p, gw, eta: float):
    """Plant-side waves ``(sigma_p+, sigma_p-)`` for input ``p`` and ``gw = G^T omega``."""
    c = _check_eta(eta)
    p, gw = np.asarray(p, float), np.asarray(gw, float)
    return (p - eta * gw) / c, (p + eta * gw) / c


def encode_optimizer_wave(u, y, eta: float):
    """Optimizer-side waves ``(sigma_o+, sigma_o-)`` for command ``u`` and measurement ``y``."""
    c = _check_eta(eta)
    u, y = np.asarray(u, float), np.asarray(y, float)
    return (u + eta * y) / c, (u - eta * y) / c


def decode_plant_input(sigma_p_minus, gw, eta: float):
    c = _check_eta(eta)
    return c * np.asarray(sigma_p_minus, float) - eta * np.asarray(gw, float)


def decode_optimizer_measurement(u, sigma_o_minus, eta: float):
    c = _check_eta(eta)
    return (np.asarray(u, float) - c * np.asarray(sigma_o_minus, float)) / eta


def couple_plant_port(sigma_p_minus, gw_free, gain, eta: float):
    """Plant input consistent with the post-step generator frequencies.

    Solves ``p = sqrt(2 eta) sigma_p- - eta * gw_next`` where the plant step
    gives ``gw_next = gw_free + gain * p``; ``gw_free`` is the generator
    frequency the step would reach with ``p = 0`` and ``gain`` the (diagonal)
    sensitivity ``h * G^T M^-1 G``.
    """
    c = _check_eta(eta)
    return (c * np.asarray(sigma_p_minus, float) - eta * np.asarray(gw_free, float)) \
        / (1.0 + eta * np.asarray(gain, float))


def couple_optimizer_port(u_free, b, lo, hi, sigma_o_minus, eta: float):
    """Measurement ``y`` consistent with the post-step command.

    The optimizer step maps ``y`` to ``u_next = clip(u_free - b * y, lo, hi)``
    with ``b >= 0``; this returns the unique ``(y, u_next)`` satisfying the
    decode relation ``y = (u_next - sqrt(2 eta) sigma_o-) / eta``. The map is
    monotone in ``y``, so the clipped cases have closed forms too.
    """
    c = _check_eta(eta)
    s = c * np.asarray(sigma_o_minus, float)
    u_free = np.asarray(u_free, float)
    y = (u_free - s) / (eta + b)
    u = u_free - b * y
    u = np.clip(u, lo, hi)
    return (u - s) / eta, u


def delay_steps(delay: float, h: float) -> int:
    """Delay rounded to the nearest whole number of steps."""
    if delay < 0:
        raise ValueError("delay must be nonnegative")
    return int(round(delay / h))


@dataclass(frozen=True)
class WaveChannelConfig:
    eta: float = 1.0
    delay_down: float = 0.011
    delay_up: float = 0.011
    filter_enabled: bool = False
    zeta_u: float = 0.010
    zeta_omega: float = 0.020
    step: float = 6e-4

    def __post_init__(self):
        _check_eta(self.eta)
        if self.delay_down < 0 or self.delay_up < 0:
            raise ValueError("delays must be nonnegative")
        if not self.step > 0:
            raise ValueError("step must be positive")
        if self.filter_enabled and not (self.zeta_u > 0 and self.zeta_omega > 0):
            raise ValueError("filter time constants must be positive")

    @property
    def steps_down(self) -> int:
        return delay_steps(self.delay_down, self.step)

    @property
    def steps_up(self) -> int:
        return delay_steps(self.delay_up, self.step)

    @property
    def effective_delays(self) -> tuple[float, float]:
        return self.steps_down * self.step, self.steps_up * self.step

    @property
    def alpha_down(self) -> float:
        return math.exp(-self.step / self.zeta_u) if self.filter_enabled else 0.0

    @property
    def alpha_up(self) -> float:
        return math.exp(-self.step / self.zeta_omega) if self.filter_enabled else 0.0


@dataclass(eq=False)
class WaveChannelState:
    """Mutable channel contents.

    ``buf_down`` carries ``sigma_o+`` towards the plant and ``buf_up`` carries
    ``sigma_p+`` towards the optimizer; ``head_*`` indexes the oldest entry.
    ``filt_down``/``filt_up`` hold the current received waves ``sigma_p-`` and
    ``sigma_o-`` and are only advanced when filtering is on.
    """

    buf_down: np.ndarray
    buf_up: np.ndarray
    head_down: int
    head_up: int
    filt_down: np.ndarray
    filt_up: np.ndarray
    arrived_down: np.ndarray
    arrived_up: np.ndarray

    def copy(self) -> "WaveChannelState":
        return WaveChannelState(self.buf_down.copy(), self.buf_up.copy(), self.head_down,
                                self.head_up, self.filt_down.copy(), self.filt_up.copy(),
                                self.arrived_down.copy(), self.arrived_up.copy())


def init_channel(config: WaveChannelConfig, wave) -> WaveChannelState:
    """Fill both delay lines and both filters with the constant ``wave``."""
    wave = np.asarray(wave, float)
    nd, nu = config.steps_down, config.steps_up
    if (nd, nu) != (config.delay_down / config.step, config.delay_up / config.step):
        log.info("channel delays rounded to %d/%d steps (%.4g s / %.4g s)",
                 nd, nu, *config.effective_delays)
    return WaveChannelState(
        buf_down=np.broadcast_to(wave, (nd,) + wave.shape).copy(),
        buf_up=np.broadcast_to(wave, (nu,) + wave.shape).copy(),
        head_down=0, head_up=0,
        filt_down=wave.copy(), filt_up=wave.copy(),
        arrived_down=wave.copy(), arrived_up=wave.copy())


def _filtered(config, state, a_u, a_w):
    if not config.filter_enabled:
        return a_u, a_w
    ad, au = config.alpha_down, config.alpha_up
    return ad * state.filt_down + (1 - ad) * a_u, au * state.filt_up + (1 - au) * a_w


def channel_peek(state: WaveChannelState, config: WaveChannelConfig):
    """Received ``(sigma_p-, sigma_o-)`` for the current step, without advancing.

    Only defined when both delays are at least one step.
    """
    if state.buf_down.shape[0] == 0 or state.buf_up.shape[0] == 0:
        raise ValueError("a zero-step delay line has no output before its input is known")
    return _filtered(config, state, state.buf_down[state.head_down], state.buf_up[state.head_up])


def channel_step(state: WaveChannelState, config: WaveChannelConfig, sigma_o_plus_in,
                 sigma_p_plus_in):
    """Push this step's outgoing waves and return the received ``(sigma_p-, sigma_o-)``.

    Mutates ``state``. A zero-step delay line passes its input straight through.
    """
    sigma_o_plus_in = np.asarray(sigma_o_plus_in, float)
    sigma_p_plus_in = np.asarray(sigma_p_plus_in, float)
    nd, nu = state.buf_down.shape[0], state.buf_up.shape[0]
    if nd:
        a_u = state.buf_down[state.head_down].copy()
        state.buf_down[state.head_down] = sigma_o_plus_in
        state.head_down = (state.head_down + 1) % nd
    else:
        a_u = sigma_o_plus_in.copy()
    if nu:
        a_w = state.buf_up[state.head_up].copy()
        state.buf_up[state.head_up] = sigma_p_plus_in
        state.head_up = (state.head_up + 1) % nu
    else:
        a_w = sigma_p_plus_in.copy()
    out_down, out_up = _filtered(config, state, a_u, a_w)
    state.arrived_down, state.arrived_up = a_u, a_w
    state.filt_down, state.filt_up = out_down, out_up
    return out_down, out_up


def channel_storage(state: WaveChannelState, config: WaveChannelConfig, equilibrium_wave):
    """Energy in flight along the delay lines, plus filter energy when enabled.

    The line integrals are left Riemann sums over the buffer contents, each
    entry weighted by the step. Broadcasts over any batch axes of the waves.
    """
    w = np.asarray(equilibrium_wave, float)
    h = config.step
    total = 0.0
    for buf in (state.buf_down, state.buf_up):
        if buf.shape[0]:
            dev = buf - w
            total = total + 0.5 * h * np.sum(dev * dev, axis=(0, -1))
    if config.filter_enabled:
        dd = state.filt_down - w
        du = state.filt_up - w
        total = total + 0.5 * config.zeta_u * np.sum(dd * dd, axis=-1) \
            + 0.5 * config.zeta_omega * np.sum(du * du, axis=-1)
    return total
