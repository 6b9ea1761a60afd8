"""Augmented projected primal-dual optimizer.

The optimizer state is kept as one flat vector ``z = (u, phi, lam, pi,
rho_plus, rho_minus)``; :class:`StateLayout` hands out the block slices.
Every function here broadcasts over leading axes so a batch of independent
controllers (one per random seed, say) can be advanced together.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from freqnet.dispatch import DispatchProblem, KKTPoint, grad_J, residual_g, residual_h, residual_r

__all__ = [
    "StateLayout",
    "OptimizerState",
    "ControllerGains",
    "project_box_velocity",
    "project_orthant_velocity",
    "generation_drive",
    "optimizer_derivative",
    "optimizer_storage",
    "project_feasible",
    "step_optimizer_projected_euler",
]

ACTIVE_TOL = 1e-9


@dataclass(frozen=True)
class StateLayout:
    n_g: int
    n: int
    n_t: int
    m: int

    @classmethod
    def for_problem(cls, problem: DispatchProblem) -> "StateLayout":
        net = problem.net
        return cls(net.n_g, net.n, net.n_t, net.m)

    @property
    def size(self) -> int:
        return self.n_g + 2 * self.n + self.n_t + 2 * self.m

    def _offsets(self):
        sizes = (self.n_g, self.n, self.n, self.n_t, self.m, self.m)
        return np.concatenate([[0], np.cumsum(sizes)])

    @property
    def u(self) -> slice:
        o = self._offsets()
        return slice(o[0], o[1])

    @property
    def phi(self) -> slice:
        o = self._offsets()
        return slice(o[1], o[2])

    @property
    def lam(self) -> slice:
        o = self._offsets()
        return slice(o[2], o[3])

    @property
    def pi(self) -> slice:
        o = self._offsets()
        return slice(o[3], o[4])

    @property
    def rho_plus(self) -> slice:
        o = self._offsets()
        return slice(o[4], o[5])

    @property
    def rho_minus(self) -> slice:
        o = self._offsets()
        return slice(o[5], o[6])

    def split(self, z):
        return (z[..., self.u], z[..., self.phi], z[..., self.lam], z[..., self.pi],
                z[..., self.rho_plus], z[..., self.rho_minus])


@dataclass(frozen=True, eq=False)
class OptimizerState:
    u: np.ndarray
    phi: np.ndarray
    lam: np.ndarray
    pi: np.ndarray
    rho_plus: np.ndarray
    rho_minus: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.u, self.phi, self.lam, self.pi,
                               self.rho_plus, self.rho_minus]).astype(float)

    @classmethod
    def from_flat(cls, layout: StateLayout, z) -> "OptimizerState":
        return cls(*(np.array(b) for b in layout.split(np.asarray(z, float))))

    @classmethod
    def from_kkt(cls, point: KKTPoint) -> "OptimizerState":
        return cls(point.u, point.phi, point.lam, point.pi, point.rho_plus, point.rho_minus)


@dataclass(frozen=True, eq=False)
class ControllerGains:
    """Diagonal time constants (scalars broadcast) and the augmentation gain."""

    tau_u: np.ndarray | float = 1.0
    tau_phi: np.ndarray | float = 1.0
    tau_lambda: np.ndarray | float = 1.0
    tau_pi: np.ndarray | float = 1.0
    tau_plus: np.ndarray | float = 1.0
    tau_minus: np.ndarray | float = 1.0
    kappa: float = 1.0

    def __post_init__(self):
        for name in ("tau_u", "tau_phi", "tau_lambda", "tau_pi", "tau_plus", "tau_minus"):
            val = np.asarray(getattr(self, name), float)
            if np.any(val <= 0):
                raise ValueError(f"{name} must be strictly positive")
            object.__setattr__(self, name, val)
        if not self.kappa > 0:
            raise ValueError("kappa must be strictly positive")

    def tau_vector(self, layout: StateLayout) -> np.ndarray:
        """Diagonal of the block time-constant matrix over the flat state."""
        tau = np.empty(layout.size)
        tau[layout.u] = self.tau_u
        tau[layout.phi] = self.tau_phi
        tau[layout.lam] = self.tau_lambda
        tau[layout.pi] = self.tau_pi
        tau[layout.rho_plus] = self.tau_plus
        tau[layout.rho_minus] = self.tau_minus
        return tau


def project_box_velocity(x, v, lo, hi, tol: float = ACTIVE_TOL):
    """Project velocity ``v`` onto the tangent cone of ``[lo, hi]`` at ``x``."""
    x = np.asarray(x, float)
    v = np.asarray(v, float)
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    if np.any(x < lo - tol) or np.any(x > hi + tol):
        raise ValueError("point lies outside the box")
    blocked = ((x <= lo + tol) & (v < 0)) | ((x >= hi - tol) & (v > 0))
    return np.where(blocked, 0.0, v)


def project_orthant_velocity(x, v, tol: float = ACTIVE_TOL):
    return project_box_velocity(x, v, 0.0, np.inf, tol)


def generation_drive(problem: DispatchProblem, gains: ControllerGains, z) -> np.ndarray:
    """Measurement-free part of the generation velocity, ``-grad J - G^T lam - kappa G^T r``.

    The full unprojected velocity of ``u`` is this minus ``y``.
    """
    layout = StateLayout.for_problem(problem)
    z = np.asarray(z, float)
    u, phi, lam = z[..., layout.u], z[..., layout.phi], z[..., layout.lam]
    r = residual_r(problem, u, phi)
    return -grad_J(problem, u) - lam @ problem.net.G - gains.kappa * (r @ problem.net.G)


def optimizer_derivative(problem: DispatchProblem, gains: ControllerGains, z, y,
                         tol: float = ACTIVE_TOL) -> np.ndarray:
    """Vector field of the projected primal-dual optimizer driven by measurement ``y``."""
    net = problem.net
    layout = StateLayout.for_problem(problem)
    z = np.asarray(z, float)
    if z.shape[-1] != layout.size:
        raise ValueError(f"state has size {z.shape[-1]}, expected {layout.size}")
    y = np.asarray(y, float)
    if y.shape[-1] != net.n_g:
        raise ValueError("measurement dimension must equal the number of generators")
    u, phi, lam, pi, rp, rm = layout.split(z)
    kappa = gains.kappa

    r = residual_r(problem, u, phi)
    g = residual_g(problem, phi)
    hp, hm = residual_h(problem, phi)

    xi_u = -grad_J(problem, u) - lam @ net.G - kappa * (r @ net.G) - y
    du = project_box_velocity(u, xi_u, problem.u_lo, problem.u_hi, tol) / gains.tau_u
    line_mult = pi @ net.T + rp - rm
    dphi = (lam @ net.L - line_mult @ net.K + kappa * (r @ net.L)) / gains.tau_phi
    dlam = r / gains.tau_lambda
    dpi = g / gains.tau_pi
    drp = project_orthant_velocity(rp, hp, tol) / gains.tau_plus
    drm = project_orthant_velocity(rm, hm, tol) / gains.tau_minus
    return np.concatenate([du, dphi, dlam, dpi, drp, drm], axis=-1)


def optimizer_storage(gains: ControllerGains, z, z_star, layout: StateLayout):
    """Half the tau-weighted squared distance between ``z`` and ``z_star``."""
    dz = np.asarray(z, float) - np.asarray(z_star, float)
    return 0.5 * np.sum(gains.tau_vector(layout) * dz * dz, axis=-1)


def project_feasible(problem: DispatchProblem, z, layout: StateLayout | None = None):
    """Euclidean projection onto the optimizer feasibility set.

    Clamps ``u`` to its box and the line multipliers to the nonnegative
    orthant, and removes the mean of ``phi``.
    """
    layout = layout or StateLayout.for_problem(problem)
    z = np.array(z, float)
    z[..., layout.u] = np.clip(z[..., layout.u], problem.u_lo, problem.u_hi)
    phi = z[..., layout.phi]
    z[..., layout.phi] = phi - phi.mean(axis=-1, keepdims=True)
    z[..., layout.rho_plus] = np.maximum(z[..., layout.rho_plus], 0.0)
    z[..., layout.rho_minus] = np.maximum(z[..., layout.rho_minus], 0.0)
    return z


def step_optimizer_projected_euler(problem: DispatchProblem, gains: ControllerGains, z, y,
                                   h: float) -> np.ndarray:
    if h <= 0:
        raise ValueError("step must be positive")
    # the projection follows, so velocities are masked only exactly on a bound
    f = optimizer_derivative(problem, gains, z, y, tol=0.0)
    return project_feasible(problem, np.asarray(z, float) + h * f)
