"""Tests for the matrix-free Gram operator and its preconditioner."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from app.schemas import SamplerSpec
from core.errors import ParameterError, ResourceError
from core.gram import GramOperator, gram_dense, gram_matvec, precond_matvec
from core.partitions import Partition, PartitionEnsemble
from core.samplers import sample_ensemble
from tests.conftest import dense_gram, random_ensemble

TWO_PARTITIONS = PartitionEnsemble([Partition([0, 0, 1]), Partition([0, 1, 1])])


def test_two_partition_product():
    np.testing.assert_allclose(gram_matvec(GramOperator(TWO_PARTITIONS), [1, 0, 0]), [1, 0.5, 0])


def test_two_partition_dense():
    expected = [[1, 0.5, 0], [0.5, 1, 0.5], [0, 0.5, 1]]
    np.testing.assert_allclose(gram_dense(GramOperator(TWO_PARTITIONS)), expected)


def test_zero_vector():
    g = GramOperator(random_ensemble(1, n=20, m=5))
    np.testing.assert_array_equal(gram_matvec(g, np.zeros(20)), np.zeros(20))


def test_single_cluster_is_all_ones():
    g = GramOperator(PartitionEnsemble([Partition(np.zeros(4, dtype=int))]))
    np.testing.assert_array_equal(g.dense(), np.ones((4, 4)))


def test_matvec_matches_dense(rng):
    g = GramOperator(random_ensemble(2, n=100, m=20), jitter=0.05)
    v = rng.standard_normal(100)
    np.testing.assert_allclose(g.matvec(v), g.dense() @ v, rtol=0, atol=1e-12)


def test_row_means(rng):
    ensemble = random_ensemble(6, n=30, m=7)
    np.testing.assert_allclose(GramOperator(ensemble).row_means(), dense_gram(ensemble).mean(axis=1), atol=1e-12)


def test_thread_count_does_not_change_bits(rng):
    ensemble = random_ensemble(3, n=200, m=70)
    v = rng.standard_normal(200)
    serial = GramOperator(ensemble, jitter=0.1).matvec(v)
    threaded = GramOperator(ensemble, jitter=0.1, n_jobs=4).matvec(v)
    assert np.array_equal(serial, threaded)


def test_dense_cap():
    g = GramOperator(random_ensemble(0, n=50, m=2), dense_cap=10)
    with pytest.raises(ResourceError):
        g.dense()


class TestPreconditioner:
    def test_exact_inverse_for_single_partition(self, rng):
        ensemble = random_ensemble(4, n=40, m=1)
        g = GramOperator(ensemble, jitter=0.3)
        v = rng.standard_normal(40)
        np.testing.assert_allclose(precond_matvec(g, gram_matvec(g, v)), v, rtol=0, atol=1e-10)

    def test_singletons(self, rng):
        g = GramOperator(PartitionEnsemble([Partition(np.arange(6))] * 3), jitter=1.0)
        v = rng.standard_normal(6)
        np.testing.assert_allclose(g.precond_matvec(v), v / 2)

    def test_needs_positive_sigma(self):
        with pytest.raises(ParameterError):
            GramOperator(TWO_PARTITIONS).precond_matvec(np.ones(3))

    def test_explicit_sigma_overrides_jitter(self, rng):
        g = GramOperator(PartitionEnsemble([Partition(np.arange(4))]), jitter=0.0, precond_sigma=1.0)
        v = rng.standard_normal(4)
        np.testing.assert_allclose(g.precond_matvec(v), v / 2)

    def test_reduces_condition_number(self):
        sigma = 0.1
        g = GramOperator(random_ensemble(8, n=60, m=10, max_clusters=6), jitter=sigma)
        A = g.dense()
        B = np.column_stack([g.precond_matvec(e) for e in np.eye(60)])
        kappa = np.linalg.cond(A)
        # B A is similar to an SPD matrix, so its eigenvalues are real and positive
        eig = np.sort(np.linalg.eigvals(B @ A).real)
        assert eig[-1] / eig[0] < kappa


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(2, 60), m=st.integers(1, 30))
def test_gram_is_positive_semidefinite(seed, n, m):
    K = gram_dense(GramOperator(random_ensemble(seed, n=n, m=m)))
    assert np.linalg.eigvalsh(K).min() >= -1e-8
    np.testing.assert_array_equal(np.diag(K), np.ones(n))


@pytest.mark.parametrize("kind", ["rf", "fastcluster"])
@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(2, 60), m=st.integers(1, 20))
def test_sampled_gram_is_positive_semidefinite(kind, seed, n, m):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 3))
    y = X[:, 0] + 0.1 * rng.standard_normal(n)
    ensemble = sample_ensemble(SamplerSpec(kind=kind, seed=seed), m, X, y)
    K = gram_dense(GramOperator(ensemble))
    assert np.linalg.eigvalsh(K).min() >= -1e-8
    np.testing.assert_array_equal(np.diag(K), np.ones(n))
