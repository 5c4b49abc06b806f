import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from geossl import diffcore as dc
from geossl.softrank import (PavBlocks, SoftRankConfig, hard_rank, isotonic_l2, isotonic_vjp, soft_rank,
                             soft_rank_values, soft_rank_vjp)
from oracles import isotonic_minmax, permutahedron_projection_grid, project_grid, soft_rank_margin

vec = arrays(np.float64, st.integers(2, 24),
             elements=st.floats(-5, 5, allow_nan=False, allow_subnormal=False))


@pytest.mark.parametrize("y, expected", [([3, 2, 1], [3, 2, 1]), ([1, 3], [2, 2]),
                                         ([1, 2, 0], [1.5, 1.5, 0])])
def test_isotonic_examples(y, expected):
    out, _ = isotonic_l2(y)
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_isotonic_grid_oracle():
    np.testing.assert_allclose(project_grid([1, 2, 0]), [1.5, 1.5, 0], atol=1e-9)


def test_isotonic_rejects_nonfinite():
    with pytest.raises(ValueError):
        isotonic_l2([1.0, np.nan])


def test_isotonic_matches_minmax_oracle_on_random_vectors():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        n = int(rng.integers(1, 33))
        y = rng.normal(size=n) * rng.choice([0.1, 1.0, 10.0])
        if rng.random() < 0.3:
            y = np.round(y)  # force ties
        out, _ = isotonic_l2(y)
        np.testing.assert_allclose(out, isotonic_minmax(y), atol=1e-9, rtol=0)


@given(vec)
def test_isotonic_blocks_partition_and_are_ordered(y):
    out, blocks = isotonic_l2(y)
    assert blocks.sizes.sum() == len(y)
    assert blocks.starts[0] == 0 and np.all(blocks.sizes > 0)
    # strictly decreasing up to rounding of the block sums
    scale = max(1.0, float(np.max(np.abs(y))))
    assert np.all(np.diff(blocks.means) < 1e-12 * scale)
    np.testing.assert_allclose(out, np.repeat(blocks.means, blocks.sizes))
    # each block holds the mean of its inputs
    for b, (s, n) in enumerate(zip(blocks.starts, blocks.sizes)):
        assert blocks.means[b] == pytest.approx(np.mean(y[s:s + n]), abs=1e-9)


def test_isotonic_vjp_examples():
    g = np.array([1.0, 2.0, 3.0])
    singletons = PavBlocks(np.array([0, 1, 2]), np.array([3.0, 2.0, 1.0]), 3)
    np.testing.assert_array_equal(isotonic_vjp(g, singletons), g)
    one = PavBlocks(np.array([0]), np.array([2.0]), 3)
    np.testing.assert_array_equal(isotonic_vjp(g, one), [2.0, 2.0, 2.0])
    with pytest.raises(ValueError, match="stale"):
        isotonic_vjp(np.ones(4), one)


def test_soft_rank_well_separated():
    out = soft_rank(np.array([0.1, 0.9, 0.5]), SoftRankConfig(1e-3))
    np.testing.assert_allclose(out, [1, 3, 2], atol=1e-6)


@pytest.mark.parametrize("eps", [1e-3, 0.1, 1.0, 100.0])
def test_full_tie_collapses_to_mean_rank(eps):
    out = soft_rank(np.array([5.0, 5.0, 5.0]), SoftRankConfig(eps))
    np.testing.assert_allclose(out, [2, 2, 2], atol=1e-12)
    np.testing.assert_allclose(permutahedron_projection_grid([5 / eps] * 3), [2, 2, 2], atol=1e-9)


def test_soft_rank_matches_permutahedron_grid_oracle():
    rng = np.random.default_rng(5)
    for _ in range(20):
        s = rng.normal(size=3)
        eps = float(rng.choice([0.3, 1.0, 3.0]))
        want = permutahedron_projection_grid(s / eps)
        got = soft_rank(s, SoftRankConfig(eps))
        np.testing.assert_allclose(got, want, atol=0.01)


def test_descending_is_ascending_of_negation(rng):
    s = rng.normal(size=10)
    d = soft_rank(s, SoftRankConfig(0.5, "descending"))
    a = soft_rank(-s, SoftRankConfig(0.5, "ascending"))
    np.testing.assert_array_equal(d, a)


def test_hard_rank_examples():
    assert hard_rank([0.2, 0.8], "descending").tolist() == [2, 1]
    assert hard_rank([7.0], "ascending").tolist() == [1]
    assert hard_rank([7.0], "descending").tolist() == [1]
    assert hard_rank([1, 1, 0], "descending").tolist() == [1, 2, 3]


def test_soft_rank_errors():
    with pytest.raises(ValueError):
        soft_rank(np.array([1.0]))
    with pytest.raises(ValueError):
        soft_rank(np.array([1.0, np.inf]))
    with pytest.raises(ValueError):
        SoftRankConfig(0.0)
    with pytest.raises(ValueError):
        SoftRankConfig(1.0, "sideways")


@given(vec, st.sampled_from([1e-3, 0.1, 1.0, 10.0]))
def test_soft_rank_sum_is_invariant(s, eps):
    n = len(s)
    assert soft_rank(s, SoftRankConfig(eps)).sum() == pytest.approx(n * (n + 1) / 2, rel=1e-9, abs=1e-9)


@given(vec, st.floats(-100, 100), st.sampled_from([1e-2, 1.0]))
def test_soft_rank_shift_invariance(s, c, eps):
    a = soft_rank(s, SoftRankConfig(eps))
    b = soft_rank(s + c, SoftRankConfig(eps))
    np.testing.assert_allclose(a, b, atol=1e-6 / eps)


@given(vec)
def test_soft_rank_is_continuous(s):
    cfg = SoftRankConfig(0.5)
    a = soft_rank(s, cfg)
    b = soft_rank(s + 1e-7 * np.arange(len(s)), cfg)
    assert np.max(np.abs(a - b)) < 1e-4


def separated_vector(rng, n, min_gap=1.0):
    """Random order of values whose sorted gaps are all >= ``min_gap``."""
    values = np.cumsum(min_gap + rng.exponential(1.0, n)) + rng.normal(0, 100)
    return rng.permutation(values)


def test_hard_rank_limit_on_separated_vectors():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 65))
        s = separated_vector(rng, n)
        for direction in ("ascending", "descending"):
            out = soft_rank(s, SoftRankConfig(1e-3, direction))
            worst = max(worst, np.max(np.abs(out - hard_rank(s, direction))))
    assert worst < 1e-6


def test_vjp_distinct_blocks_is_a_permutation():
    s = np.array([0.3, -1.0, 2.0, 0.9])
    cfg = SoftRankConfig(1e-3)
    _, res = soft_rank_values(s, cfg)
    g = np.array([1.0, 2.0, 3.0, 4.0])
    out = soft_rank_vjp(s, g, res, cfg)
    # separated inputs make every projection block a singleton, so the rank is locally constant
    assert np.all(res[0][1].sizes == 1)
    np.testing.assert_array_equal(out, np.zeros(4))
    np.testing.assert_array_equal(isotonic_vjp(g[res[0][0]], res[0][1]), g[res[0][0]])


def test_vjp_single_block_is_centered_adjoint():
    s = np.array([1.0, 1.0, 1.0, 1.0])
    cfg = SoftRankConfig(0.5)
    _, res = soft_rank_values(s, cfg)
    g = np.array([1.0, 2.0, 3.0, 6.0])
    assert res[0][1].sizes.tolist() == [4]
    # isotonic part averages to mean(g); the rank Jacobian is (I - that) / eps
    np.testing.assert_allclose(isotonic_vjp(g, res[0][1]), np.full(4, g.mean()))
    np.testing.assert_allclose(soft_rank_vjp(s, g, res, cfg), (g - g.mean()) / 0.5)


def test_vjp_stale_residuals():
    cfg = SoftRankConfig(0.5)
    _, res = soft_rank_values(np.ones(3), cfg)
    with pytest.raises(ValueError, match="stale"):
        soft_rank_vjp(np.ones(4), np.ones(4), res, cfg)


def _fd_check(s, eps, direction, rng):
    w = rng.normal(size=s.shape)
    cfg = SoftRankConfig(eps, direction)
    return dc.grad_check(lambda x: dc.sum(dc.mul(soft_rank(x, cfg), dc.constant(w))), s)


def test_vjp_matches_finite_differences_mixed_blocks():
    rng = np.random.default_rng(9)
    checked = 0
    while checked < 50:
        n = 16
        eps = float(rng.choice([1e-3, 0.05, 0.5]))
        s = rng.normal(size=n) * 0.01
        if soft_rank_margin(s, eps) < 1e-4:
            continue  # too close to a block boundary
        for direction in ("ascending", "descending"):
            assert _fd_check(s, eps, direction, rng) < 1e-5
        checked += 1


def test_soft_rank_node_rowwise_matches_values(rng):
    s = rng.normal(size=(4, 6))
    cfg = SoftRankConfig(0.2, "descending")
    node = soft_rank(dc.leaf(s), cfg)
    np.testing.assert_array_equal(node.value, soft_rank(s, cfg))
