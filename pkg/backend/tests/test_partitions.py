"""Tests for the partition data model and its O(N) products."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from core.errors import DataError, DimensionError, ParameterError
from core.partitions import (
    ExtendedPartition,
    Partition,
    PartitionEnsemble,
    cross_dense,
    cross_matvec,
    cross_rows,
    partition_block_solve,
    partition_matvec,
)
from tests.conftest import random_ensemble, random_pairing, random_partition

MAX_N = 40


class TestPartition:
    def test_rejects_empty_negative_and_gapped_labels(self):
        with pytest.raises(DataError):
            Partition([])
        with pytest.raises(DataError):
            Partition([0, -1])
        with pytest.raises(DataError):
            Partition([0, 2, 2])

    def test_from_labels_relabels_contiguously(self):
        p, keys = Partition.from_labels([7, 3, 7, 9])
        assert p.n_clusters == 3
        assert keys.tolist() == [3, 7, 9]
        assert p.assignments.tolist() == [1, 0, 1, 2]

    def test_assignments_are_read_only(self):
        p = Partition([0, 1, 0])
        with pytest.raises(ValueError):
            p.assignments[0] = 1

    def test_cluster_index_and_sizes(self):
        p = Partition([1, 0, 1, 2])
        assert p.cluster_sizes.tolist() == [1, 2, 1]
        assert [c.tolist() for c in p.cluster_index] == [[1], [0, 2], [3]]

    def test_refines(self):
        fine = Partition([0, 1, 2, 2])
        coarse = Partition([0, 0, 1, 1])
        assert fine.refines(coarse)
        assert not coarse.refines(fine)
        assert coarse.refines(Partition([0, 0, 0, 0]))


class TestPartitionMatvec:
    def test_two_clusters(self):
        np.testing.assert_array_equal(partition_matvec(Partition([0, 0, 1]), [1, 2, 3]), [3, 3, 3])

    def test_singletons_are_identity(self, rng):
        v = rng.standard_normal(6)
        np.testing.assert_array_equal(partition_matvec(Partition(np.arange(6)), v), v)

    def test_single_cluster_sums(self):
        np.testing.assert_array_equal(partition_matvec(Partition([0, 0, 0, 0]), [1, -1, 2, 0]), [2, 2, 2, 2])

    def test_block_rhs_matches_columns(self, rng):
        p = random_partition(rng, 30, 5)
        V = rng.standard_normal((30, 3))
        out = partition_matvec(p, V)
        for j in range(3):
            np.testing.assert_allclose(out[:, j], partition_matvec(p, V[:, j]), rtol=0, atol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            partition_matvec(Partition([0, 1]), [1.0, 2.0, 3.0])

    @settings(max_examples=200, deadline=None)
    @given(
        labels=arrays(np.int64, st.integers(1, MAX_N), elements=st.integers(0, 6)),
        data=st.data(),
    )
    def test_matches_co_membership(self, labels, data):
        p, _ = Partition.from_labels(labels)
        v = data.draw(arrays(np.float64, labels.size, elements=st.floats(-1e3, 1e3)))
        np.testing.assert_allclose(partition_matvec(p, v), p.co_membership() @ v, rtol=1e-12, atol=1e-9)


class TestBlockSolve:
    def test_single_cluster(self):
        np.testing.assert_allclose(partition_block_solve(Partition([0, 0, 0]), 1.0, [4, 4, 4]), [1, 1, 1])

    def test_singletons_halve(self, rng):
        v = rng.standard_normal(5)
        np.testing.assert_allclose(partition_block_solve(Partition(np.arange(5)), 1.0, v), v / 2)

    def test_matches_dense_solve(self, rng):
        p = random_partition(rng, 50, 7)
        v = rng.standard_normal(50)
        expected = np.linalg.solve(p.co_membership() + 0.1 * np.eye(50), v)
        np.testing.assert_allclose(partition_block_solve(p, 0.1, v), expected, rtol=0, atol=1e-10)

    @pytest.mark.parametrize("sigma", [0.0, -1.0])
    def test_sigma_must_be_positive(self, sigma):
        with pytest.raises(ParameterError):
            partition_block_solve(Partition([0, 1]), sigma, [1.0, 1.0])


class TestCrossKernel:
    def test_shared_cluster_sums_training_values(self):
        p = Partition([0, 0, 0])
        pairing = [ExtendedPartition(p, [0])] * 2
        np.testing.assert_allclose(cross_matvec(pairing, [1.0, 2.0, 4.0]), [7.0])

    def test_unseen_cluster_gives_zero(self):
        pairing = [ExtendedPartition(Partition([0, 1, 2]), [-1])]
        np.testing.assert_array_equal(cross_matvec(pairing, [1.0, 2.0, 3.0]), [0.0])

    def test_labels_outside_training_space(self):
        with pytest.raises(DataError):
            ExtendedPartition(Partition([0, 1]), [2])

    def test_matches_dense_cross_kernel(self, rng):
        ensemble = random_ensemble(3, n=80, m=12)
        pairing = random_pairing(4, ensemble, n_test=25)
        v = rng.standard_normal(80)
        K = cross_dense(pairing)
        np.testing.assert_allclose(cross_matvec(pairing, v), K @ v, rtol=0, atol=1e-12)
        index = np.array([0, 5, 24])
        np.testing.assert_array_equal(cross_rows(pairing, index), K[index])


class TestEnsemble:
    def test_partitions_must_cover_same_points(self):
        with pytest.raises(DimensionError):
            PartitionEnsemble([Partition([0, 1]), Partition([0, 0, 1])])

    def test_requires_at_least_one_partition(self):
        with pytest.raises(ParameterError):
            PartitionEnsemble([])

    def test_subset_is_prefix(self):
        ensemble = random_ensemble(0, n=10, m=6)
        sub = ensemble.subset(3)
        assert sub.m == 3
        assert all(a == b for a, b in zip(sub.partitions, ensemble.partitions[:3]))

    def test_extend_without_handles(self):
        with pytest.raises(DataError):
            random_ensemble(0, n=5, m=2).extend(np.zeros((1, 1)))
