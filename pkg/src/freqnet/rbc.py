"""Randomized block-coordinate (RBC) sampled optimizer updates.

At every sampling instant one block of the flat optimizer state is drawn
and only that block moves, by ``epsilon / p_beta`` times the full vector
field. The scaling makes the expected increment equal the full projected
Euler increment, which is the property the tests lean on.

Block draws use numpy's ``Generator(PCG64(seed))``: one ``random()`` double
per draw, mapped through the cumulative probabilities. Doubles are never
buffered, so drawing one at a time or in bulk gives the same sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from freqnet.controller import ControllerGains, StateLayout, optimizer_derivative
from freqnet.dispatch import DispatchProblem

__all__ = [
    "RNG_ALGORITHM",
    "BlockPartition",
    "RbcConfig",
    "default_partition",
    "singleton_partition",
    "whole_partition",
    "make_rng",
    "sample_block",
    "sample_blocks",
    "block_step_scale",
    "rbc_block_step",
    "rbc_step",
    "expected_direction_test",
    "weighted_block_sum",
]

RNG_ALGORITHM = "numpy.PCG64"


@dataclass(frozen=True, eq=False)
class BlockPartition:
    """Disjoint cover of ``range(n_z)`` with per-block draw probabilities."""

    blocks: tuple
    probs: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        blocks = tuple(np.asarray(b, dtype=np.int64).ravel() for b in self.blocks)
        if not blocks or any(b.size == 0 for b in blocks):
            raise ValueError("blocks must be nonempty")
        probs = np.asarray(self.probs, float).ravel()
        if probs.shape != (len(blocks),):
            raise ValueError("need one probability per block")
        if np.any(probs <= 0):
            raise ValueError("block probabilities must be strictly positive")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError(f"block probabilities sum to {probs.sum():.15f}, not 1")
        cover = np.sort(np.concatenate(blocks))
        if not np.array_equal(cover, np.arange(cover.size)):
            raise ValueError("blocks must be disjoint and cover every coordinate exactly once")
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "probs", probs)

    @property
    def n_b(self) -> int:
        return len(self.blocks)

    @property
    def n_z(self) -> int:
        return int(sum(b.size for b in self.blocks))

    @property
    def sizes(self) -> np.ndarray:
        return np.array([b.size for b in self.blocks], dtype=np.int64)

    @property
    def expected_coords_per_step(self) -> float:
        return float(self.probs @ self.sizes)

    def flat_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Concatenated block indices and their offsets (CSR layout)."""
        offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(np.int64)
        return np.concatenate(self.blocks), offsets

    @classmethod
    def with_uniform(cls, blocks, name: str = "custom") -> "BlockPartition":
        return cls(tuple(blocks), np.full(len(blocks), 1.0 / len(blocks)), name)


def default_partition(n_g: int, n: int, n_t: int, m: int) -> BlockPartition:
    """Per-unit ``u_i`` blocks, bus pairs ``(phi_i, lam_i)``, ``pi`` singletons
    and line pairs ``(rho+_l, rho-_l)``, all equally likely."""
    layout = StateLayout(n_g, n, n_t, m)
    idx = np.arange(layout.size)
    u, phi, lam = idx[layout.u], idx[layout.phi], idx[layout.lam]
    pi, rp, rm = idx[layout.pi], idx[layout.rho_plus], idx[layout.rho_minus]
    blocks = [[j] for j in u]
    blocks += [[phi[i], lam[i]] for i in range(n)]
    blocks += [[j] for j in pi]
    blocks += [[rp[k], rm[k]] for k in range(m)]
    return BlockPartition.with_uniform(blocks, "default")


def singleton_partition(n_z: int) -> BlockPartition:
    return BlockPartition.with_uniform([[j] for j in range(n_z)], "singleton")


def whole_partition(n_z: int) -> BlockPartition:
    """One block holding every coordinate; RBC then reduces to projected Euler."""
    return BlockPartition((np.arange(n_z),), np.ones(1), "whole")


@dataclass(frozen=True, eq=False)
class RbcConfig:
    epsilon: float
    seed: int
    partition: BlockPartition

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def sample_blocks(rng: np.random.Generator, probs, size: int) -> np.ndarray:
    """Draw ``size`` block indices (same stream as repeated :func:`sample_block`)."""
    cdf = np.cumsum(np.asarray(probs, float))
    draws = rng.random(size)
    return np.minimum(np.searchsorted(cdf, draws * cdf[-1], side="right"), cdf.size - 1)


def sample_block(rng: np.random.Generator, probs) -> tuple[int, np.random.Generator]:
    """Draw one block index; the generator is advanced in place and returned."""
    return int(sample_blocks(rng, probs, 1)[0]), rng


def block_step_scale(partition: BlockPartition, beta: int, epsilon: float) -> np.ndarray:
    """Per-coordinate step ``epsilon / p_beta`` on block ``beta`` and zero elsewhere."""
    scale = np.zeros(partition.n_z)
    scale[partition.blocks[beta]] = epsilon / partition.probs[beta]
    return scale


def rbc_block_step(problem: DispatchProblem, gains: ControllerGains, z, y, epsilon: float,
                   partition: BlockPartition, beta: int) -> np.ndarray:
    """Deterministic part of one RBC update for a given block ``beta``.

    The full vector field is evaluated, masked to the block and scaled.
    Generation and line multipliers are clamped afterwards; the angle
    potentials are re-centred only when the block contains one of them.
    """
    layout = StateLayout.for_problem(problem)
    z = np.asarray(z, float)
    f = optimizer_derivative(problem, gains, z, y, tol=0.0)
    blk = partition.blocks[beta]
    out = z.copy()
    out[..., blk] += (epsilon / partition.probs[beta]) * f[..., blk]
    out[..., layout.u] = np.clip(out[..., layout.u], problem.u_lo, problem.u_hi)
    out[..., layout.rho_plus] = np.maximum(out[..., layout.rho_plus], 0.0)
    out[..., layout.rho_minus] = np.maximum(out[..., layout.rho_minus], 0.0)
    phi_idx = np.arange(layout.size)[layout.phi]
    if np.intersect1d(blk, phi_idx).size:
        phi = out[..., layout.phi]
        out[..., layout.phi] = phi - phi.mean(axis=-1, keepdims=True)
    return out


def rbc_step(problem: DispatchProblem, gains: ControllerGains, z, y, config: RbcConfig,
             rng: np.random.Generator) -> tuple[np.ndarray, np.random.Generator]:
    """Draw a block and apply one RBC update."""
    beta, rng = sample_block(rng, config.partition.probs)
    return rbc_block_step(problem, gains, z, y, config.epsilon, config.partition, beta), rng


def weighted_block_sum(partition: BlockPartition, f) -> np.ndarray:
    """``sum_beta p_beta * (p_beta^-1 E_beta f)``, which must reproduce ``f``."""
    f = np.asarray(f, float)
    total = np.zeros_like(f)
    for blk, p in zip(partition.blocks, partition.probs):
        part = np.zeros_like(f)
        part[..., blk] = f[..., blk] / p
        total += p * part
    return total


def expected_direction_test(problem: DispatchProblem, gains: ControllerGains, z, y,
                            partition: BlockPartition, n_samples: int,
                            rng: np.random.Generator | None = None) -> np.ndarray:
    """Monte-Carlo mean of the scaled block direction ``p_beta^-1 E_beta f``."""
    rng = rng if rng is not None else make_rng(0)
    f = optimizer_derivative(problem, gains, z, y)
    betas = sample_blocks(rng, partition.probs, n_samples)
    counts = np.bincount(betas, minlength=partition.n_b)
    mean = np.zeros_like(f)
    for beta, cnt in enumerate(counts):
        blk = partition.blocks[beta]
        mean[..., blk] += cnt * f[..., blk] / partition.probs[beta]
    return mean / n_samples
