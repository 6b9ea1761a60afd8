import numpy as np
import pytest

from freqnet.controller import OptimizerState, project_feasible, step_optimizer_projected_euler
from freqnet.rbc import (
    BlockPartition,
    RbcConfig,
    block_step_scale,
    default_partition,
    expected_direction_test,
    make_rng,
    rbc_block_step,
    rbc_step,
    sample_block,
    sample_blocks,
    singleton_partition,
    weighted_block_sum,
    whole_partition,
)
from freqnet.controller import optimizer_derivative


def test_default_partition_dimensions():
    part = default_partition(4, 14, 1, 20)
    assert (part.n_b, part.n_z) == (39, 73)
    assert part.expected_coords_per_step == pytest.approx(73 / 39)
    small = default_partition(1, 1, 0, 0)
    assert (small.n_b, small.n_z) == (2, 3)


def test_partition_invariants():
    part = default_partition(4, 14, 1, 20)
    cover = np.sort(np.concatenate(part.blocks))
    np.testing.assert_array_equal(cover, np.arange(73))
    assert part.probs.sum() == pytest.approx(1.0)
    idx, off = part.flat_arrays()
    assert off[-1] == 73 and idx.size == 73


@pytest.mark.parametrize("blocks, probs", [
    (([0, 1], [1]), [0.5, 0.5]),          # overlap
    (([0], [2]), [0.5, 0.5]),             # gap
    (([0], [1]), [0.3, 0.3]),             # probabilities off
    (([0], [1]), [1.0, 0.0]),             # zero probability
    (([0], []), [0.5, 0.5]),              # empty block
])
def test_partition_validation(blocks, probs):
    with pytest.raises(ValueError):
        BlockPartition(blocks, probs)


def test_rbc_config_validation():
    with pytest.raises(ValueError):
        RbcConfig(0.0, 0, singleton_partition(3))


def test_single_block_sampling():
    rng = make_rng(0)
    assert all(sample_block(rng, [1.0])[0] == 0 for _ in range(20))


def test_uniform_frequencies():
    draws = sample_blocks(make_rng(11), np.full(39, 1 / 39), 1_000_000)
    counts = np.bincount(draws, minlength=39)
    p = 1 / 39
    sigma = np.sqrt(1_000_000 * p * (1 - p))
    assert np.abs(counts - 1_000_000 * p).max() < 3.5 * sigma


def test_seed_determinism_and_stream_equivalence():
    probs = np.full(39, 1 / 39)
    a = sample_blocks(make_rng(5), probs, 1000)
    np.testing.assert_array_equal(a, sample_blocks(make_rng(5), probs, 1000))
    rng = make_rng(5)
    one_by_one = [sample_block(rng, probs)[0] for _ in range(1000)]
    np.testing.assert_array_equal(a, one_by_one)


def test_kkt_point_is_fixed_for_every_block(ieee14_final, ieee14):
    problem, point = ieee14_final
    z = OptimizerState.from_kkt(point).flat()
    part = ieee14.rbc.partition
    for beta in range(part.n_b):
        out = rbc_block_step(problem, ieee14.gains, z, np.zeros(4), 6e-4, part, beta)
        assert np.abs(out - z).max() < 1e-10


def test_whole_partition_equals_projected_euler(ieee14):
    problem, gains, lay = ieee14.problem, ieee14.gains, ieee14.layout
    rng = np.random.default_rng(0)
    z = project_feasible(problem, rng.normal(0, 0.3, lay.size))
    y = rng.normal(size=4)
    cfg = RbcConfig(6e-4, 0, whole_partition(lay.size))
    out, _ = rbc_step(problem, gains, z, y, cfg, make_rng(0))
    np.testing.assert_allclose(out, step_optimizer_projected_euler(problem, gains, z, y, 6e-4), atol=1e-15)


def test_other_coordinates_untouched(ieee14):
    problem, gains, lay = ieee14.problem, ieee14.gains, ieee14.layout
    part = ieee14.rbc.partition
    rng = np.random.default_rng(1)
    z = np.zeros(lay.size)
    z[lay.u] = [0.5, 0.3, 0.2, 0.1]
    z[lay.rho_plus] = z[lay.rho_minus] = 1.0
    z[lay.lam] = rng.normal(size=14)
    for beta in (0, 5, 20, 30):
        out = rbc_block_step(problem, gains, z, rng.normal(size=4), 1e-4, part, beta)
        mask = np.ones(lay.size, bool)
        mask[part.blocks[beta]] = False
        if beta >= 4 and beta < 18:
            mask[lay.phi] = False          # a phi block re-centres all potentials
        np.testing.assert_array_equal(out[mask], z[mask])
        assert np.any(out[~mask] != z[~mask])


def test_block_step_scale():
    part = BlockPartition(([0, 1], [2]), [0.25, 0.75])
    np.testing.assert_allclose(block_step_scale(part, 0, 1e-3), [4e-3, 4e-3, 0.0])


def test_weighted_sum_identity(ieee14):
    rng = np.random.default_rng(2)
    f = rng.normal(size=(10, 73))
    parts = [ieee14.rbc.partition, singleton_partition(73)]
    w = rng.uniform(0.1, 1, 39)
    parts.append(BlockPartition(ieee14.rbc.partition.blocks, w / w.sum()))
    for part in parts:
        assert np.abs(weighted_block_sum(part, f) - f).max() < 1e-12
    assert np.all(weighted_block_sum(parts[0], np.zeros(73)) == 0)


def test_sampled_direction_is_unbiased(ieee14):
    problem, gains, lay = ieee14.problem, ieee14.gains, ieee14.layout
    part = ieee14.rbc.partition
    rng = np.random.default_rng(3)
    z = project_feasible(problem, rng.normal(0, 0.2, lay.size))
    y = rng.normal(size=4)
    n = 100_000
    mean = expected_direction_test(problem, gains, z, y, part, n, make_rng(4))
    f = optimizer_derivative(problem, gains, z, y)
    # coordinate i of a single draw is f_i / p with probability p, else 0
    p = 1 / 39
    sd = np.abs(f) * np.sqrt((1 - p) / p)
    assert np.all(np.abs(mean - f) <= 4 * sd / np.sqrt(n) + 1e-15)


def test_zero_field_gives_zero_average(ieee14_final, ieee14):
    problem, point = ieee14_final
    z = OptimizerState.from_kkt(point).flat()
    mean = expected_direction_test(problem, ieee14.gains, z, np.zeros(4), ieee14.rbc.partition, 1000)
    assert np.abs(mean).max() < 1e-8
