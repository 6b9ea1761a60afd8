"""Constrained economic dispatch: residuals, KKT audit and an active-set oracle.

All quantities are per-unit on the network base. The problem is

    min_u,phi  1/2 (u - u_ref)^T Q (u - u_ref)
    s.t.       G u - d - L phi = 0
               T B C^T phi = P_sch
               f_lo <= B C^T phi <= f_hi
               u_lo <= u <= u_hi,    1^T phi = 0

The oracle never integrates any dynamics; it enumerates working sets of
binding inequalities and solves each equality-constrained QP densely, so it
is an independent check on the controller's steady state.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from freqnet.network import NetworkMatrices

__all__ = [
    "DispatchProblem",
    "KKTPoint",
    "ResidualReport",
    "InfeasibleDispatchError",
    "residual_r",
    "residual_g",
    "residual_h",
    "grad_J",
    "kkt_residual",
    "solve_dispatch_oracle",
    "solve_dispatch_bruteforce",
    "strict_complementarity_audit",
]

_FEAS_TOL = 1e-10
_DUAL_TOL = 1e-10


class InfeasibleDispatchError(RuntimeError):
    """No working set yields a primal-dual feasible point."""

    def __init__(self, message: str, best_violation: float = np.inf):
        super().__init__(message)
        self.best_violation = best_violation


@dataclass(frozen=True, eq=False)
class DispatchProblem:
    net: NetworkMatrices
    Q: np.ndarray          # diagonal of the cost Hessian
    u_ref: np.ndarray
    d: np.ndarray
    p_sch: np.ndarray
    f_lo: np.ndarray
    f_hi: np.ndarray
    u_lo: np.ndarray
    u_hi: np.ndarray

    def __post_init__(self):
        net = self.net
        shapes = {"Q": net.n_g, "u_ref": net.n_g, "u_lo": net.n_g, "u_hi": net.n_g,
                  "d": net.n, "p_sch": net.n_t, "f_lo": net.m, "f_hi": net.m}
        for name, size in shapes.items():
            arr = np.array(np.broadcast_to(np.asarray(getattr(self, name), float), (size,)))
            object.__setattr__(self, name, arr)
        if np.any(self.Q <= 0):
            raise ValueError("cost weights Q must be strictly positive")
        if np.any(self.u_lo > self.u_hi):
            raise ValueError("u_lo must not exceed u_hi")
        if np.any(self.f_lo > self.f_hi):
            raise ValueError("f_lo must not exceed f_hi")

    @property
    def m_J(self) -> float:
        """Strong-convexity modulus of the cost."""
        return float(self.Q.min())

    def with_demand(self, d) -> "DispatchProblem":
        return DispatchProblem(self.net, self.Q, self.u_ref, d, self.p_sch,
                               self.f_lo, self.f_hi, self.u_lo, self.u_hi)


@dataclass(frozen=True, eq=False)
class KKTPoint:
    u: np.ndarray
    phi: np.ndarray
    lam: np.ndarray
    pi: np.ndarray
    rho_plus: np.ndarray
    rho_minus: np.ndarray
    active: tuple[str, ...] = ()


@dataclass(frozen=True)
class ResidualReport:
    r_norm: float
    g_norm: float
    h_violation: float
    stationarity_u: float
    stationarity_phi: float
    complementarity: float

    def max(self) -> float:
        return max(self.r_norm, self.g_norm, self.h_violation, self.stationarity_u,
                   self.stationarity_phi, self.complementarity)


def _check(arr, size, name):
    arr = np.asarray(arr, float)
    if arr.shape[-1] != size:
        raise ValueError(f"{name} has trailing dimension {arr.shape[-1]}, expected {size}")
    return arr


def residual_r(problem: DispatchProblem, u, phi) -> np.ndarray:
    """Nodal balance residual ``G u - d - L phi`` (broadcasts over leading axes)."""
    net = problem.net
    u = _check(u, net.n_g, "u")
    phi = _check(phi, net.n, "phi")
    return u @ net.G.T - problem.d - phi @ net.L


def residual_g(problem: DispatchProblem, phi) -> np.ndarray:
    net = problem.net
    phi = _check(phi, net.n, "phi")
    return phi @ (net.T @ net.K).T - problem.p_sch


def residual_h(problem: DispatchProblem, phi) -> tuple[np.ndarray, np.ndarray]:
    net = problem.net
    flow = _check(phi, net.n, "phi") @ net.K.T
    return flow - problem.f_hi, problem.f_lo - flow


def grad_J(problem: DispatchProblem, u) -> np.ndarray:
    return problem.Q * (np.asarray(u, float) - problem.u_ref)


def _normal_cone_distance(u, v, lo, hi, tol):
    """Componentwise distance from ``v`` to the normal cone of the box at ``u``."""
    at_lo = u <= lo + tol
    at_hi = u >= hi - tol
    dist = np.abs(v).astype(float)
    dist = np.where(at_lo & ~at_hi, np.maximum(v, 0.0), dist)
    dist = np.where(at_hi & ~at_lo, np.maximum(-v, 0.0), dist)
    dist = np.where(at_lo & at_hi, 0.0, dist)
    return dist


def kkt_residual(problem: DispatchProblem, point: KKTPoint, tol: float = 1e-9) -> ResidualReport:
    net = problem.net
    u, phi = np.asarray(point.u, float), np.asarray(point.phi, float)
    r = residual_r(problem, u, phi)
    g = residual_g(problem, phi)
    hp, hm = residual_h(problem, phi)
    v = -(grad_J(problem, u) + net.G.T @ point.lam)
    stat_u = _normal_cone_distance(u, v, problem.u_lo, problem.u_hi, tol)
    stat_phi = (-net.L @ point.lam + net.K.T @ (net.T.T @ point.pi)
                + net.K.T @ (point.rho_plus - point.rho_minus))
    box_viol = np.concatenate([np.maximum(problem.u_lo - u, 0), np.maximum(u - problem.u_hi, 0)])
    h_viol = np.concatenate([np.maximum(hp, 0), np.maximum(hm, 0), box_viol])
    return ResidualReport(
        r_norm=float(np.linalg.norm(r)),
        g_norm=float(np.linalg.norm(g)),
        h_violation=float(np.linalg.norm(h_viol)),
        stationarity_u=float(np.linalg.norm(stat_u)),
        stationarity_phi=float(np.linalg.norm(stat_phi)),
        complementarity=float(abs(point.rho_plus @ hp) + abs(point.rho_minus @ hm)),
    )


# -- oracle -----------------------------------------------------------------

class _QPData:
    """Stacked constraint rows over x = (u, phi)."""

    def __init__(self, problem: DispatchProblem):
        net = problem.net
        n_g, n, m, n_t = net.n_g, net.n, net.m, net.n_t
        self.problem = problem
        self.n_g, self.n, self.m, self.n_t = n_g, n, m, n_t
        nx = n_g + n
        self.H = np.zeros((nx, nx))
        self.H[:n_g, :n_g] = np.diag(problem.Q)
        self.c = np.concatenate([-problem.Q * problem.u_ref, np.zeros(n)])

        eq_rows = [np.hstack([net.G, -net.L]),
                   np.hstack([np.zeros((n_t, n_g)), net.T @ net.K]),
                   np.hstack([np.zeros((1, n_g)), np.ones((1, n))])]
        self.A_eq = np.vstack(eq_rows)
        self.b_eq = np.concatenate([problem.d, problem.p_sch, [0.0]])

        K = net.K
        eye = np.eye(n_g)
        self.A_in = np.vstack([
            np.hstack([np.zeros((m, n_g)), K]),
            np.hstack([np.zeros((m, n_g)), -K]),
            np.hstack([eye, np.zeros((n_g, n))]),
            np.hstack([-eye, np.zeros((n_g, n))]),
        ])
        self.b_in = np.concatenate([problem.f_hi, -problem.f_lo, problem.u_hi, -problem.u_lo])
        names = [f"flow_hi[{br.name}]" for br in net.spec.branches]
        names += [f"flow_lo[{br.name}]" for br in net.spec.branches]
        names += [f"u_hi[{j}]" for j in range(n_g)] + [f"u_lo[{j}]" for j in range(n_g)]
        self.names = names
        self.n_in = len(self.b_in)
        self.n_eq = len(self.b_eq)
        # a pair of opposite bounds can only both bind when the interval is a point
        self._partner = np.concatenate([np.arange(m, 2 * m), np.arange(m),
                                        2 * m + n_g + np.arange(n_g), 2 * m + np.arange(n_g)])

    def solve_eqp(self, working):
        """Solve the QP with ``working`` inequalities held as equalities.

        Returns (x, mu_eq, mu_in_working) or None when the linear system is
        inconsistent.
        """
        W = sorted(working)
        E = np.vstack([self.A_eq, self.A_in[W]]) if W else self.A_eq
        e = np.concatenate([self.b_eq, self.b_in[W]]) if W else self.b_eq
        nx, ne = self.H.shape[0], E.shape[0]
        K = np.zeros((nx + ne, nx + ne))
        K[:nx, :nx] = self.H
        K[:nx, nx:] = E.T
        K[nx:, :nx] = E
        rhs = np.concatenate([-self.c, e])
        sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
        scale = 1.0 + np.abs(rhs).max()
        if np.linalg.norm(K @ sol - rhs) > 1e-9 * scale:
            return None
        x, mu = sol[:nx], sol[nx:]
        return x, mu[:self.n_eq], mu[self.n_eq:]

    def violations(self, x):
        return self.A_in @ x - self.b_in

    def to_point(self, x, mu_eq, working, mu_w) -> KKTPoint:
        n_g, n, m, n_t = self.n_g, self.n, self.m, self.n_t
        mu_in = np.zeros(self.n_in)
        mu_in[sorted(working)] = mu_w
        mu_in = np.maximum(mu_in, 0.0)
        p = self.problem
        u = np.clip(x[:n_g], p.u_lo, p.u_hi)
        phi = x[n_g:] - x[n_g:].mean()
        return KKTPoint(u=u, phi=phi, lam=mu_eq[:n].copy(), pi=mu_eq[n:n + n_t].copy(),
                        rho_plus=mu_in[:m].copy(), rho_minus=mu_in[m:2 * m].copy(),
                        active=tuple(self.names[i] for i in sorted(working)))


def _feasibility_gap(qp: _QPData) -> float:
    """Smallest achievable max-violation of the inequalities (LP phase one)."""
    nx = qp.H.shape[0]
    # variables (x, s): minimise s  s.t. A_in x - s <= b_in, A_eq x = b_eq, s >= 0
    cost = np.zeros(nx + 1)
    cost[-1] = 1.0
    A_ub = np.hstack([qp.A_in, -np.ones((qp.n_in, 1))])
    A_eq = np.hstack([qp.A_eq, np.zeros((qp.n_eq, 1))])
    bounds = [(None, None)] * nx + [(0, None)]
    res = linprog(cost, A_ub=A_ub, b_ub=qp.b_in, A_eq=A_eq, b_eq=qp.b_eq,
                  bounds=bounds, method="highs")
    if res.status == 2:
        return np.inf
    if not res.success:
        raise RuntimeError(f"feasibility LP failed: {res.message}")
    return float(res.x[-1])


def _accept(qp, working, sol):
    x, mu_eq, mu_w = sol
    viol = qp.violations(x)
    free = np.ones(qp.n_in, bool)
    free[list(working)] = False
    primal_ok = not np.any(viol[free] > _FEAS_TOL) and not np.any(np.abs(viol[~free]) > 1e-8)
    dual_ok = not np.any(mu_w < -_DUAL_TOL)
    return primal_ok and dual_ok


def solve_dispatch_oracle(problem: DispatchProblem, seed: int | None = None,
                          max_sets: int = 20000) -> KKTPoint:
    """Solve the dispatch problem by guided working-set enumeration.

    The search starts from the problem with no binding inequality. Each
    candidate is expanded by adding its most violated inequality and by
    dropping its most negative multiplier, breadth first. ``seed`` permutes
    the tie-breaking order so independent runs can be compared.

    Raises
    ------
    InfeasibleDispatchError
        When the constraints admit no feasible point.
    """
    qp = _QPData(problem)
    gap = _feasibility_gap(qp)
    if gap > 1e-9:
        raise InfeasibleDispatchError(
            f"dispatch problem is infeasible (best max violation {gap:.3e})", gap)

    rank = np.arange(qp.n_in)
    if seed is not None:
        rank = np.random.default_rng(seed).permutation(qp.n_in)

    def pick(values, candidates):
        # largest value, ties broken by the (possibly permuted) rank
        best = max(candidates, key=lambda i: (round(float(values[i]), 12), -rank[i]))
        return best

    queue = deque([frozenset()])
    seen = {frozenset()}
    best_violation = np.inf
    while queue and len(seen) <= max_sets:
        working = queue.popleft()
        sol = qp.solve_eqp(working)
        if sol is None:
            continue
        x, mu_eq, mu_w = sol
        viol = qp.violations(x)
        if _accept(qp, working, sol):
            return qp.to_point(x, mu_eq, working, mu_w)
        children = []
        outside = [i for i in range(qp.n_in) if i not in working and viol[i] > _FEAS_TOL]
        if outside:
            best_violation = min(best_violation, float(viol[outside].max()))
            j = pick(viol, outside)
            if qp._partner[j] not in working or qp.b_in[j] == -qp.b_in[qp._partner[j]]:
                children.append(working | {j})
        W = sorted(working)
        negative = [W[k] for k in range(len(W)) if mu_w[k] < -_DUAL_TOL]
        if negative:
            neg = {W[k]: -mu_w[k] for k in range(len(W))}
            children.append(working - {pick(neg, negative)})
        for child in children:
            if child not in seen:
                seen.add(child)
                queue.append(child)

    # guided search exhausted: fall back to enumeration by working-set size
    return _enumerate(qp, order=rank, max_sets=max_sets)


def _enumerate(qp: _QPData, order, max_sets=None, exhaustive=False) -> KKTPoint:
    idx = sorted(range(qp.n_in), key=lambda i: order[i])
    max_size = qp.n_in if exhaustive else qp.n_g + qp.n_t
    tried = 0
    for size in range(max_size + 1):
        for working in itertools.combinations(idx, size):
            tried += 1
            if max_sets is not None and tried > max_sets:
                raise InfeasibleDispatchError("working-set enumeration budget exhausted")
            if any(qp._partner[i] in working and qp.b_in[i] != -qp.b_in[qp._partner[i]]
                   for i in working):
                continue
            sol = qp.solve_eqp(working)
            if sol is not None and _accept(qp, working, sol):
                return qp.to_point(sol[0], sol[1], working, sol[2])
    raise InfeasibleDispatchError("no working set satisfies the KKT conditions")


def solve_dispatch_bruteforce(problem: DispatchProblem) -> KKTPoint:
    """Exhaustive enumeration over every subset of inequalities (tiny cases only)."""
    qp = _QPData(problem)
    if qp.n_in > 16:
        raise ValueError("brute-force enumeration is limited to 16 inequalities")
    return _enumerate(qp, order=np.arange(qp.n_in), exhaustive=True)


def strict_complementarity_audit(problem: DispatchProblem, point: KKTPoint,
                                 active_tol: float = 1e-8, mult_tol: float = 1e-7) -> list[str]:
    """Names of constraints that bind with a multiplier below ``mult_tol``."""
    net = problem.net
    hp, hm = residual_h(problem, point.phi)
    flagged = []
    for k, br in enumerate(net.spec.branches):
        if abs(hp[k]) < active_tol and point.rho_plus[k] < mult_tol:
            flagged.append(f"flow_hi[{br.name}]")
        if abs(hm[k]) < active_tol and point.rho_minus[k] < mult_tol:
            flagged.append(f"flow_lo[{br.name}]")
    v = -(grad_J(problem, point.u) + net.G.T @ point.lam)
    for j in range(net.n_g):
        if abs(point.u[j] - problem.u_hi[j]) < active_tol and v[j] < mult_tol:
            flagged.append(f"u_hi[{j}]")
        if abs(point.u[j] - problem.u_lo[j]) < active_tol and -v[j] < mult_tol:
            flagged.append(f"u_lo[{j}]")
    return flagged
