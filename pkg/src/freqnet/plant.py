"""Linearised swing dynamics of the transmission network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from freqnet.network import NetworkMatrices

__all__ = ["PlantParams", "PlantState", "plant_derivative", "step_plant", "plant_storage"]


@dataclass(frozen=True, eq=False)
class PlantParams:
    """Per-bus inertia ``M`` and damping ``D`` (diagonals, per-unit)."""

    M: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        M = np.atleast_1d(np.asarray(self.M, float))
        D = np.atleast_1d(np.asarray(self.D, float))
        if np.any(M <= 0) or np.any(D <= 0):
            raise ValueError("inertia and damping must be strictly positive")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "D", D)

    @classmethod
    def uniform(cls, n: int, inertia: float, damping: float) -> "PlantParams":
        return cls(np.full(n, float(inertia)), np.full(n, float(damping)))


@dataclass(frozen=True, eq=False)
class PlantState:
    theta: np.ndarray
    omega: np.ndarray


def plant_derivative(params: PlantParams, net: NetworkMatrices, state: PlantState, p, d):
    """Return ``(theta_dot, omega_dot)`` for generator input ``p`` and demand ``d``."""
    theta = np.asarray(state.theta, float)
    omega = np.asarray(state.omega, float)
    p = np.asarray(p, float)
    if theta.shape[-1] != net.n or omega.shape[-1] != net.n or p.shape[-1] != net.n_g:
        raise ValueError("state or input dimension does not match the network")
    omega_dot = (-params.D * omega - theta @ net.L + p @ net.G.T - d) / params.M
    return omega.copy(), omega_dot


def step_plant(params: PlantParams, net: NetworkMatrices, state: PlantState, p, d,
               h: float) -> PlantState:
    """Advance one semi-implicit Euler step.

    The frequency is updated first and the angle integrates the new frequency.
    The scheme is explicit and first order, and unlike forward Euler it does
    not pump energy into the lightly damped swing modes.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    _, omega_dot = plant_derivative(params, net, state, p, d)
    omega = state.omega + h * omega_dot
    theta = state.theta + h * omega
    return PlantState(theta, omega)


def plant_storage(params: PlantParams, net: NetworkMatrices, state: PlantState,
                  theta_star, omega_star=0.0):
    """Incremental kinetic plus network potential energy about an equilibrium."""
    dw = np.asarray(state.omega, float) - omega_star
    dt = np.asarray(state.theta, float) - theta_star
    # L kills the common mode; removing it first avoids cancellation
    dt = dt - dt.mean(axis=-1, keepdims=True)
    kinetic = 0.5 * np.sum(params.M * dw * dw, axis=-1)
    potential = 0.5 * np.sum((dt @ net.L) * dt, axis=-1)
    return kinetic + potential
