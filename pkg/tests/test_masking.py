import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hctransformer.masking import (HumanMask, MaskSource, dataset_average, fallback_mask, partition,
                                   position_masks)

grids = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=st.floats(0, 1))


def feats_for(grid, d=3, seed=0):
    return np.random.default_rng(seed).normal(size=grid.shape + (d,))


def test_all_ones_mask_is_all_human():
    g = np.ones((3, 4))
    p = partition(feats_for(g), HumanMask(g), 0.5)
    assert len(p.human_set) == 12 and p.context_set == []


def test_boundary_value_counts_as_human():
    g = np.array([[0.5, 0.2]])
    p = partition(feats_for(g), HumanMask(g), 0.5)
    assert p.human_positions == {(0, 0)}


def test_two_by_two_example():
    g = np.array([[0.9, 0.1], [0.6, 0.4]])
    p = partition(feats_for(g), HumanMask(g), 0.5)
    assert p.human_positions == {(0, 0), (1, 0)}
    assert p.context_positions == {(0, 1), (1, 1)}


def test_partition_carries_feature_vectors():
    g = np.array([[0.9, 0.1]])
    f = feats_for(g)
    p = partition(f, HumanMask(g), 0.5)
    np.testing.assert_array_equal(p.human_set[0][1], f[0, 0])
    np.testing.assert_array_equal(p.context_set[0][1], f[0, 1])


def test_partition_errors():
    g = np.ones((2, 2))
    with pytest.raises(ValueError, match="does not match"):
        partition(np.zeros((3, 2, 4)), HumanMask(g), 0.5)
    with pytest.raises(ValueError, match="threshold"):
        partition(np.zeros((2, 2, 4)), HumanMask(g), 1.0)
    with pytest.raises(ValueError):
        HumanMask(np.array([[1.5]]))


@settings(max_examples=1000, deadline=None)
@given(grids, st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_partition_is_a_monotone_set_partition(grid, lam_a, lam_b):
    lo, hi = sorted((lam_a, lam_b))
    f = feats_for(grid)
    p_lo = partition(f, HumanMask(grid), lo)
    p_hi = partition(f, HumanMask(grid), hi)
    everything = {(r, c) for r in range(grid.shape[0]) for c in range(grid.shape[1])}
    for p in (p_lo, p_hi):
        assert p.human_positions | p.context_positions == everything
        assert not p.human_positions & p.context_positions
        assert len(p.human_set) + len(p.context_set) == grid.size
    assert p_hi.human_positions <= p_lo.human_positions


@settings(max_examples=100, deadline=None)
@given(grids, st.integers(0, 1000))
def test_partition_ignores_feature_values(grid, seed):
    a = partition(feats_for(grid, seed=seed), HumanMask(grid), 0.5)
    b = partition(feats_for(grid, seed=seed + 1), HumanMask(grid), 0.5)
    assert a.human_positions == b.human_positions


def test_maxpool_fallback_for_empty_clip():
    clips = [HumanMask([[0.2]]), HumanMask([[0.7]])]
    out = fallback_mask(clips, HumanMask([[0.5]]), 0.5)
    np.testing.assert_array_equal(out[0].grid, [[0.7]])
    assert out[0].source is MaskSource.MAXPOOL
    assert out[1].source is MaskSource.PROVIDED


def test_dataset_average_fallback_for_empty_video():
    clips = [HumanMask(np.full((2, 2), 0.1)), HumanMask(np.full((2, 2), 0.3))]
    avg = HumanMask(np.array([[0.9, 0.0], [0.0, 0.0]]))
    out = fallback_mask(clips, avg, 0.5)
    for m in out:
        assert m.source is MaskSource.DATASET_AVERAGE
        np.testing.assert_array_equal(m.grid, avg.grid)


def test_dataset_average_of_two_masks():
    avg = dataset_average([np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])])
    np.testing.assert_array_equal(avg.grid, [[0.5, 0.5]])


def test_fallback_errors():
    with pytest.raises(ValueError, match="empty clip list"):
        fallback_mask([], HumanMask([[1.0]]))
    with pytest.raises(ValueError, match="spatial shape"):
        fallback_mask([HumanMask([[1.0]]), HumanMask([[1.0, 0.0]])], HumanMask([[1.0]]))


def test_position_masks_flatten_grid():
    m = np.array([[[0.9, 0.1], [0.6, 0.4]]])
    hum, ctx = position_masks(m, 0.5)
    np.testing.assert_array_equal(hum, [[True, False, True, False]])
    np.testing.assert_array_equal(ctx, ~hum)
