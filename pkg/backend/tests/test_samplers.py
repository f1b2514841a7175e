"""Tests for the partition samplers and ensemble generation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from joblib import parallel_backend

from app.schemas import FastClusterConfig, SamplerSpec, TreeConfig
from core.errors import DimensionError, ParameterError
from core.gram import GramOperator
from core.samplers import (
    BRUTE_FORCE_CENTERS,
    SamplerSeed,
    _nearest_brute,
    assign_to_centers,
    categorical_partitions,
    fast_cluster_partition,
    incidence_partitions,
    lookup_labels,
    nearest_center,
    partition_at_depth,
    rf_partition,
    sample_ensemble,
)
from core.trees import train_rf_tree

POINTS = np.array([[0.0], [1.0], [10.0], [11.0]])


def co_clustered(partition, a, b):
    return partition.assignments[a] == partition.assignments[b]


class TestFastCluster:
    def test_two_centers(self):
        partition, _ = assign_to_centers(POINTS, [0, 2], [True])
        assert co_clustered(partition, 0, 1) and co_clustered(partition, 2, 3)
        assert not co_clustered(partition, 1, 2)

    def test_single_center_gives_one_cluster(self, rng):
        X = rng.standard_normal((30, 3))
        partition, _ = fast_cluster_partition(X, FastClusterConfig(h=0), SamplerSeed(9))
        assert partition.n_clusters == 1

    def test_every_row_a_center_gives_singletons(self, rng):
        X = rng.standard_normal((12, 2))
        partition, _ = assign_to_centers(X, np.arange(12), [True, True])
        assert partition.n_clusters == 12

    def test_center_row_joins_its_own_cluster(self, rng):
        X = rng.standard_normal((40, 3))
        partition, ext = fast_cluster_partition(X, FastClusterConfig(h=5), SamplerSeed(1))
        centers = ext.centers
        np.testing.assert_array_equal(ext.assign(centers), lookup_labels(ext.keys, np.arange(len(centers))))

    def test_midpoint_goes_to_lower_center(self):
        partition, ext = assign_to_centers(POINTS, [2, 0], [True])
        label = ext.assign(np.array([[5.0]]))[0]
        assert label == partition.assignments[0]

    def test_extension_dimension_check(self):
        _, ext = assign_to_centers(POINTS, [0, 2], [True])
        with pytest.raises(DimensionError):
            ext.assign(np.zeros((2, 3)))

    def test_mask_must_keep_a_dimension(self):
        with pytest.raises(ParameterError):
            assign_to_centers(POINTS, [0], [False])

    def test_kdtree_path_matches_brute_force(self, rng):
        centers = rng.standard_normal((4 * BRUTE_FORCE_CENTERS, 3))
        points = rng.standard_normal((2000, 3))
        np.testing.assert_array_equal(nearest_center(points, centers), _nearest_brute(points, centers))

    def test_kdtree_path_breaks_ties_toward_lowest_index(self, rng):
        centers = rng.integers(0, 5, size=(4 * BRUTE_FORCE_CENTERS, 2)).astype(np.float64)
        points = rng.integers(0, 5, size=(500, 2)).astype(np.float64)
        points[:100] += 0.5
        np.testing.assert_array_equal(nearest_center(points, centers), _nearest_brute(points, centers))

    def test_duplicate_center_rows_share_the_lowest_label(self):
        X = np.repeat(np.arange(3.0)[:, None], 2 * BRUTE_FORCE_CENTERS, axis=0)
        partition, ext = assign_to_centers(X, np.arange(X.shape[0]), [True])
        assert partition.n_clusters == 3
        np.testing.assert_array_equal(ext.nearest(np.array([[0.0], [2.0]])), [0, 4 * BRUTE_FORCE_CENTERS])

    def test_masked_dimensions_are_ignored(self):
        X = np.array([[0.0, 100.0], [1.0, -100.0], [10.0, 0.0]])
        partition, _ = assign_to_centers(X, [0, 2], [True, False])
        assert co_clustered(partition, 0, 1)


class TestRandomForestSampler:
    @settings(max_examples=1000, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(2, 24))
    def test_deeper_cuts_refine_shallower_ones(self, seed, n):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((n, 2))
        y = rng.standard_normal(n)
        tree = train_rf_tree(X, y, rng, TreeConfig(min_leaf=1))
        for d in range(tree.max_depth):
            deeper, _ = partition_at_depth(tree, d + 1)
            shallower, _ = partition_at_depth(tree, d)
            assert deeper.refines(shallower)

    def test_depth_zero_to_h_range(self, rng):
        X = rng.standard_normal((30, 2))
        tree = train_rf_tree(X, rng.standard_normal(30), np.random.default_rng(0))
        clusters = {rf_partition(tree, SamplerSeed(0, i)).n_clusters for i in range(60)}
        assert 1 in clusters
        assert max(clusters) > 1


class TestDataDefined:
    def test_binary_column(self):
        ensemble = categorical_partitions([np.array([1, 1, 0])], m=1)
        p = ensemble.partitions[0]
        assert co_clustered(p, 0, 1) and not co_clustered(p, 1, 2)

    def test_constant_column(self):
        assert categorical_partitions([np.array(["a"] * 5)], m=3).partitions[0].n_clusters == 1

    def test_empty_column_set(self):
        with pytest.raises(ParameterError):
            categorical_partitions([], m=1)

    def test_co_clustering_frequency(self):
        columns = [np.array([0, 0, 1, 1]), np.array([0, 0, 0, 1]), np.array([0, 1, 1, 1])]
        m = 300
        K = GramOperator(categorical_partitions(columns, m, seed=4)).dense()
        exact = sum((c[:, None] == c[None, :]).astype(float) for c in columns) / len(columns)
        sd = np.sqrt(exact * (1 - exact) / m)
        assert np.all(np.abs(K - exact) <= 4 * sd + 1e-12)

    def test_unseen_category_has_no_training_cluster(self):
        ensemble = categorical_partitions([np.array([0, 1, 1])], m=2)
        labels = ensemble.extend(np.array([[1], [7]]))[0].test_labels
        assert labels[0] == ensemble.partitions[0].assignments[1]
        assert labels[1] == -1

    def test_incidence_rows_split_by_presence(self):
        incidence = np.array([[1, 0], [1, 1], [0, 1]])
        ensemble = incidence_partitions(incidence, m=20, seed=0)
        for p in ensemble.partitions:
            assert p.n_clusters == 2
        by_items = incidence_partitions(incidence, m=5, seed=0, axis=1)
        assert by_items.n == 2


class TestEnsemble:
    @pytest.fixture
    def data(self, rng):
        X = rng.standard_normal((40, 3))
        return X, X[:, 0] + 0.1 * rng.standard_normal(40)

    @pytest.mark.parametrize("kind", ["rf", "fastcluster"])
    def test_same_seed_same_ensemble(self, data, kind):
        X, y = data
        spec = SamplerSpec(kind=kind, seed=11)
        assert sample_ensemble(spec, 5, X, y) == sample_ensemble(spec, 5, X, y)

    @pytest.mark.parametrize("kind", ["rf", "fastcluster"])
    def test_worker_count_does_not_change_samples(self, data, kind):
        X, y = data
        spec = SamplerSpec(kind=kind, seed=3)
        with parallel_backend("threading"):
            parallel = sample_ensemble(spec, 6, X, y, n_jobs=3)
        assert parallel == sample_ensemble(spec, 6, X, y)

    def test_single_sample(self, data):
        X, y = data
        assert sample_ensemble(SamplerSpec(kind="fastcluster"), 1, X).m == 1

    def test_gram_diagonal_is_one(self, data):
        X, y = data
        K = GramOperator(sample_ensemble(SamplerSpec(kind="rf"), 200, X, y)).dense()
        np.testing.assert_array_equal(np.diag(K), np.ones(40))

    def test_provenance_records_request(self, data):
        X, y = data
        ensemble = sample_ensemble(SamplerSpec(kind="fastcluster", seed=2), 4, X)
        assert ensemble.provenance["m"] == 4 and ensemble.provenance["n"] == 40
        assert ensemble.provenance["sampler"]["seed"] == 2

    def test_missing_inputs(self, data):
        X, _ = data
        with pytest.raises(ParameterError):
            sample_ensemble(SamplerSpec(kind="rf"), 2, X)
        with pytest.raises(ParameterError):
            sample_ensemble(SamplerSpec(kind="categorical"), 2)

    @settings(max_examples=1000, deadline=None)
    @given(seed=st.integers(0, 2 ** 64 - 1), stream=st.integers(0, 1000))
    def test_seed_streams_are_reproducible(self, seed, stream):
        X = np.linspace(0.0, 1.0, 24).reshape(8, 3)
        a, _ = fast_cluster_partition(X, FastClusterConfig(h=3), SamplerSeed(seed, stream))
        b, _ = fast_cluster_partition(X, FastClusterConfig(h=3), SamplerSeed(seed, stream))
        assert a == b
