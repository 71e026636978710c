import numpy as np
import pytest

from symde.core import datagen
from symde.core.decompose import (
    NOISE,
    ClusterLabels,
    Independence,
    assign_to_clusters,
    ci_test,
    dbscan,
    partial_correlation,
    pc_skeleton,
    recombine_additive,
    recombine_multiplicative,
    renormalize_weights,
)
from symde.core.errors import PartitionError, SingularConditioning, TooFewSamples, WeightMismatch
from symde.core.expr import parse, to_string
from symde.core.validate import integrate_grid


def test_dbscan_separates_the_two_modes(gm_samples):
    clusters = dbscan(gm_samples, eps=5.0, min_pts=10)
    assert clusters.k == 2
    assert clusters.noise_count == 0
    means = np.array(datagen.BIMODAL_MEANS)
    nearest = np.argmin(((gm_samples[:, None, :] - means[None]) ** 2).sum(axis=2), axis=1)
    for c in range(2):
        assert len(set(nearest[clusters.labels == c])) == 1
    assert clusters.weights.sum() == pytest.approx(1.0)


def test_dbscan_identical_points():
    clusters = dbscan(np.ones((20, 2)), eps=0.1, min_pts=5)
    assert clusters.k == 1
    assert clusters.noise_count == 0


def test_dbscan_isolated_points_are_noise():
    points = np.arange(5, dtype=float)[:, None] * 10.0
    clusters = dbscan(points, eps=1.0, min_pts=6)
    assert clusters.k == 0
    assert np.all(clusters.labels == NOISE)
    assert clusters.weights.sum() == 0.0


def test_cluster_weights_exclude_noise():
    points = np.vstack([np.zeros((9, 1)), [[100.0]]])
    clusters = dbscan(points, eps=0.5, min_pts=3)
    assert clusters.noise_count == 1
    assert clusters.weights.sum() == pytest.approx(0.9)
    assert renormalize_weights(clusters.weights) == pytest.approx([1.0])


def test_partial_correlation_examples(rng):
    independent = rng.normal(size=(10_000, 2))
    assert abs(partial_correlation(independent, 0, 1)) < 0.05
    x = rng.normal(size=500)
    assert partial_correlation(np.column_stack([x, x]), 0, 1) == pytest.approx(1.0)
    pairs = datagen.sample_gaussian4d(20_000, seed=4)
    assert partial_correlation(pairs, 0, 1) == pytest.approx(0.8, abs=0.02)


def test_partial_correlation_conditioning_removes_a_common_cause(rng):
    z = rng.normal(size=5000)
    data = np.column_stack([z + 0.5 * rng.normal(size=5000), z + 0.5 * rng.normal(size=5000), z])
    assert partial_correlation(data, 0, 1) > 0.5
    assert abs(partial_correlation(data, 0, 1, [2])) < 0.05


def test_partial_correlation_singular_conditioning(rng):
    x = rng.normal(size=100)
    data = np.column_stack([x, rng.normal(size=100), np.ones(100)])
    with pytest.raises(SingularConditioning):
        partial_correlation(data, 0, 1, [2])


def test_ci_test_examples():
    assert ci_test(0.0, 100, 0, 0.01) is Independence.INDEPENDENT
    assert ci_test(0.8, 1000, 0, 0.05) is Independence.DEPENDENT
    assert ci_test(1.0, 50, 0, 0.05) is Independence.DEPENDENT
    assert ci_test(-1.0, 50, 0, 0.05) is Independence.DEPENDENT
    with pytest.raises(TooFewSamples):
        ci_test(0.2, 5, 2, 0.05)


def test_pc_recovers_the_two_pairs():
    data = datagen.sample_gaussian4d(10_000, seed=0)
    graph = pc_skeleton(data, alpha=0.05, max_cond=2)
    assert graph.components == ((1, 2), (3, 4))
    assert graph.edges == [(1, 2), (3, 4)]
    assert graph.to_dict()["components"] == [[1, 2], [3, 4]]


@pytest.mark.slow
def test_pc_recovers_the_pairs_across_seeds():
    hits = sum(
        pc_skeleton(datagen.sample_gaussian4d(10_000, seed=s), 0.05, 2).components == ((1, 2), (3, 4))
        for s in range(100)
    )
    assert hits >= 95


def test_pc_chain_is_one_component(rng):
    x1 = rng.normal(size=3000)
    x2 = x1 + 0.3 * rng.normal(size=3000)
    x3 = x2 + 0.3 * rng.normal(size=3000)
    graph = pc_skeleton(np.column_stack([x1, x2, x3]), alpha=0.05)
    assert graph.components == ((1, 2, 3),)


def test_pc_independent_pair_mostly_splits():
    splits = sum(
        len(pc_skeleton(np.random.default_rng(s).normal(size=(500, 2)), alpha=0.05).components) == 2
        for s in range(50)
    )
    assert splits >= 42


def test_recombine_additive():
    single = recombine_additive([(1.0, parse("x1 * 2"))])
    np.testing.assert_allclose(single(np.array([[1.5], [3.0]])), [3.0, 6.0])
    left = parse("(x1 - x1) + 1")
    mixture = recombine_additive([(0.5, left), (0.5, left)])
    assert integrate_grid(mixture, [(0.0, 1.0)], 64) == pytest.approx(1.0)
    assert to_string(mixture.expression) == "0.5 * (x1 - x1 + 1) + 0.5 * (x1 - x1 + 1)"
    with pytest.raises(WeightMismatch):
        recombine_additive([(0.7, left), (0.7, left)])
    with pytest.raises(WeightMismatch):
        recombine_additive([(1.5, left), (-0.5, left)])


def test_recombine_multiplicative():
    product = recombine_multiplicative([((1, 2), parse("x1 + x2")), ((3,), parse("x1 * 2"))])
    assert product.d == 3
    np.testing.assert_allclose(product(np.array([[1.0, 2.0, 3.0]])), [18.0])
    assert to_string(product.expression) == "(x1 + x2) * (x3 * 2)"
    with pytest.raises(PartitionError):
        recombine_multiplicative([((1,), parse("x1")), ((1, 2), parse("x1 + x2"))])
    with pytest.raises(PartitionError):
        recombine_multiplicative([((1, 2), parse("x1"))])


def test_assign_to_clusters_uses_nearest_clustered_sample():
    samples = np.array([[0.0], [0.1], [10.0], [10.1], [50.0]])
    clusters = ClusterLabels(np.array([0, 0, 1, 1, NOISE]), 2, np.array([0.4, 0.4]))
    labels = assign_to_clusters(samples, clusters, np.array([[0.3], [9.0], [49.0]]))
    np.testing.assert_array_equal(labels, [0, 1, 1])
