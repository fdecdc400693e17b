import itertools
import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from selfvos.cluster import ClusterState, derive_pseudo_masks, kmeans, positional_encoding
from selfvos.datakit import SceneSpec, generate_synthetic_video
from selfvos.netcore import ArchitectureDescriptor, init_parameters
from selfvos.cluster import cluster_video


def exhaustive_two_means(points):
    """Optimal 2-partition objective by enumerating every split."""
    n = points.shape[0]
    best = np.inf
    for bits in itertools.product((0, 1), repeat=n - 1):
        lab = np.array((0,) + bits)
        if lab.min() == lab.max():
            continue
        obj = sum(((points[lab == k] - points[lab == k].mean(0)) ** 2).sum() for k in (0, 1))
        best = min(best, obj)
    return best


def test_two_blobs():
    pts = np.array([[0, 0], [0, 1], [1, 0], [10, 10], [10, 11], [11, 10]], float)
    s = kmeans(pts, 2, seed=3)
    assert len(set(s.labels[:3])) == 1 and len(set(s.labels[3:])) == 1
    assert s.labels[0] != s.labels[3]
    np.testing.assert_allclose(s.objective, 4 * 2 / 3)


def test_one_dimensional_example():
    s = kmeans(np.array([[0.0], [1], [2], [10], [11], [12]]), 2)
    np.testing.assert_allclose(sorted(s.centroids.ravel()), [1, 11])


def test_one_point_per_cluster():
    pts = np.random.default_rng(1).random((5, 3))
    s = kmeans(pts, 5)
    assert s.objective == 0.0 and sorted(s.labels) == list(range(5))


@given(st.integers(0, 2**31 - 1), st.integers(3, 10), st.integers(1, 3))
def test_near_exhaustive_optimum_and_monotone(seed, n, dim):
    pts = np.random.default_rng(seed).standard_normal((n, dim))
    s = kmeans(pts, 2, seed=seed)
    assert s.objective <= 1.05 * exhaustive_two_means(pts) + 1e-12
    assert all(b <= a * (1 + 1e-12) for a, b in zip(s.history, s.history[1:]))


def test_assignments_one_hot():
    s = kmeans(np.random.default_rng(0).random((20, 3)), 4)
    a = s.assignments
    assert a.shape == (20, 4)
    np.testing.assert_array_equal(a.sum(1), 1)


def test_kmeans_validation():
    with pytest.raises(ValueError, match="cannot fill"):
        kmeans(np.zeros((2, 2)), 3)
    with pytest.raises(ValueError):
        kmeans(np.zeros((4, 2)), 0)


def test_identical_points_do_not_crash():
    s = kmeans(np.ones((5, 2)), 3)
    assert s.objective == 0.0


def test_positional_encoding_values():
    pe = positional_encoding(0, 1, 2, dims_per_axis=4)
    assert pe.shape == (12,)
    np.testing.assert_allclose(pe[:4], [0, 1, 0, 1])
    np.testing.assert_allclose(pe[4:8], [np.sin(1), np.cos(1), np.sin(0.01), np.cos(0.01)])
    np.testing.assert_allclose(pe[8:], [np.sin(2), np.cos(2), np.sin(0.02), np.cos(0.02)])
    with pytest.raises(ValueError):
        positional_encoding(0, 0, 0, dims_per_axis=3)
    with pytest.raises(ValueError):
        positional_encoding(-1, 0, 0)


def _state(labels, M, grid):
    return ClusterState(np.zeros((M, 1)), np.asarray(labels), 0.0, grid_shape=grid)


def test_pruning_and_ordering():
    # 10 cells: cluster 0 has 5 (50%, pruned), cluster 2 has 3, cluster 1 has 2
    labels = [0] * 5 + [2] * 3 + [1] * 2
    ps = derive_pseudo_masks(_state(labels, 3, (1, 2, 5)))
    assert ps.survivors == [2, 1]
    np.testing.assert_allclose(ps.sizes, [0.3, 0.2])
    np.testing.assert_array_equal(ps.labels.ravel(), [0] * 5 + [1] * 3 + [2] * 2)


def test_exact_threshold_survives():
    labels = [0] * 4 + [1] * 6
    ps = derive_pseudo_masks(_state(labels, 2, (1, 1, 10)))
    assert ps.survivors == [0]


def test_all_pruned_warns(caplog):
    with caplog.at_level(logging.WARNING):
        ps = derive_pseudo_masks(_state([0] * 10, 2, (1, 2, 5)))
    assert ps.empty and ps.num_objects == 0
    assert "pruned" in caplog.text


def test_upsampling_and_size_check():
    ps = derive_pseudo_masks(_state([1, 0, 0, 0], 4, (1, 2, 2)), image_size=(4, 6))
    assert ps.labels.shape == (1, 4, 6)
    assert ps.labels[0, :2, :3].min() == 1 and ps.labels[0, 2:].max() == 0
    with pytest.raises(ValueError, match="multiple"):
        derive_pseudo_masks(_state([0, 0, 0, 1], 4, (1, 2, 2)), image_size=(5, 5))


def test_static_video_clusters_consistently():
    """A still video gives the same partition in every frame."""
    v = generate_synthetic_video(SceneSpec(num_objects=2, max_speed=0.0, max_rotation=0.0, frame_count=6), 7)
    p = init_parameters(ArchitectureDescriptor(), 0)
    s = cluster_video(v, p, M=4, pe_weight=0.0)
    grid = s.labels.reshape(s.grid_shape)
    assert all(np.array_equal(grid[0], g) for g in grid)
