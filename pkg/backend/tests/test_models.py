"""Tests for GP regression and kernel PCA on partition and dense kernels."""

import math

import numpy as np
import pytest
from scipy.linalg import eigh

from app.schemas import SamplerSpec, SolverOptions, TreeConfig
from core.baselines import make_dense_kernel
from core.data_io import synth_piecewise
from core.errors import DimensionError, ParameterError, SolverError
from core.models import (
    VARIANCE_FLOOR,
    GPRegressor,
    PartitionCross,
    PartitionKernel,
    gp_evaluate,
    gp_fit,
    gp_predict,
    kernel_entry_variance,
    kpca_fit,
    kpca_fit_dense,
    kpca_project,
    log_likelihood_terms,
)
from core.partitions import ExtendedPartition, Partition, PartitionEnsemble, cross_dense
from core.samplers import assign_to_centers, sample_ensemble
from tests.conftest import dense_gram, random_ensemble, random_pairing

TIGHT = SolverOptions(tol=1e-12, max_iter=5000)


def dense_gp(K, K_cross, y, noise):
    A = K + noise * np.eye(K.shape[0])
    mean = K_cross @ np.linalg.solve(A, y)
    var = 1.0 + noise - np.einsum("ij,ji->i", K_cross, np.linalg.solve(A, K_cross.T))
    return mean, var


class TestGPFit:
    def test_single_cluster_example(self):
        ensemble = PartitionEnsemble([Partition([0, 0, 0])])
        model = gp_fit(ensemble, [4.0, 4.0, 4.0], noise=1.0, options=TIGHT, standardize_targets=False)
        np.testing.assert_allclose(model.alpha, [1.0, 1.0, 1.0], atol=1e-10)

    def test_zero_targets(self):
        model = gp_fit(random_ensemble(0, n=10, m=4), np.zeros(10), noise=0.1)
        np.testing.assert_array_equal(model.alpha, np.zeros(10))

    def test_matches_dense_solve(self, rng):
        ensemble = random_ensemble(3, n=150, m=30)
        y = rng.standard_normal(150)
        model = gp_fit(ensemble, y, noise=0.05, options=TIGHT, standardize_targets=False)
        expected = np.linalg.solve(dense_gram(ensemble) + 0.05 * np.eye(150), y)
        np.testing.assert_allclose(model.alpha, expected, rtol=0, atol=1e-6)

    def test_unconverged_fit_raises_with_report(self, rng):
        with pytest.raises(SolverError) as info:
            gp_fit(random_ensemble(1, n=60, m=10), rng.standard_normal(60), noise=1e-4,
                   options=SolverOptions(tol=1e-14, max_iter=1, use_preconditioner=False))
        assert info.value.report.iterations == 1

    def test_target_length_mismatch(self):
        with pytest.raises(DimensionError):
            gp_fit(random_ensemble(1, n=5, m=2), np.zeros(4))

    def test_noise_must_be_positive(self):
        with pytest.raises(ParameterError):
            GPRegressor(PartitionKernel(random_ensemble(1, n=5, m=2)), noise=0.0)

    def test_predict_before_fit(self):
        with pytest.raises(ParameterError):
            GPRegressor(PartitionKernel(random_ensemble(1, n=5, m=2))).predict(np.zeros((1, 1)))


class TestGPPredict:
    def test_cross_with_one_training_point(self, rng):
        n, j = 6, 2
        ensemble = PartitionEnsemble([Partition(np.arange(n))] * 3)
        model = gp_fit(ensemble, rng.standard_normal(n), noise=0.5, options=TIGHT, standardize_targets=False)
        pairing = [ExtendedPartition(p, [j]) for p in ensemble.partitions]
        assert gp_predict(model, pairing).mean[0] == pytest.approx(model.alpha[j], abs=1e-12)

    def test_unseen_cluster_returns_prior(self, rng):
        ensemble = random_ensemble(2, n=20, m=5)
        noise = 0.3
        model = gp_fit(ensemble, rng.standard_normal(20), noise=noise, standardize_targets=False)
        pairing = [ExtendedPartition(p, [-1]) for p in ensemble.partitions]
        prediction = gp_predict(model, pairing)
        assert prediction.mean[0] == 0.0
        assert prediction.variance[0] == pytest.approx(1.0 + noise)

    def test_matches_dense_formulas(self, rng):
        ensemble = random_ensemble(5, n=100, m=15)
        pairing = random_pairing(6, ensemble, n_test=20)
        y = rng.standard_normal(100)
        noise = 0.1
        model = gp_fit(ensemble, y, noise=noise, options=TIGHT, standardize_targets=False)
        prediction = gp_predict(model, PartitionCross(pairing))
        mean, var = dense_gp(dense_gram(ensemble), cross_dense(pairing), y, noise)
        np.testing.assert_allclose(prediction.mean, mean, rtol=0, atol=1e-6)
        np.testing.assert_allclose(prediction.variance, var, rtol=0, atol=1e-6)

    def test_standardized_targets_round_trip_scale(self, rng):
        ensemble = random_ensemble(8, n=50, m=10)
        pairing = random_pairing(9, ensemble, n_test=10)
        y = 100.0 + 5.0 * rng.standard_normal(50)
        noise = 0.2
        model = gp_fit(ensemble, y, noise=noise, options=TIGHT)
        prediction = gp_predict(model, pairing)
        mu, sd = y.mean(), y.std()
        mean, var = dense_gp(dense_gram(ensemble), cross_dense(pairing), (y - mu) / sd, noise)
        np.testing.assert_allclose(prediction.mean, mu + sd * mean, atol=1e-5)
        np.testing.assert_allclose(prediction.variance, sd ** 2 * var, rtol=1e-6)

    def test_variances_are_floored(self):
        # every test point shares its cluster with one training point, noise is tiny
        ensemble = PartitionEnsemble([Partition(np.arange(4))])
        model = gp_fit(ensemble, np.arange(4.0), noise=1e-14, standardize_targets=False,
                       options=SolverOptions(tol=1e-6))
        prediction = gp_predict(model, [ExtendedPartition(ensemble.partitions[0], np.arange(4))])
        assert np.all(prediction.variance >= VARIANCE_FLOOR)

    def test_sampler_extension_prediction(self, rng):
        X = rng.standard_normal((80, 2))
        y = np.sin(X[:, 0])
        ensemble = sample_ensemble(SamplerSpec(kind="fastcluster", seed=0), 20, X)
        model = gp_fit(ensemble, y, noise=0.05)
        prediction = gp_predict(model, X[:5])
        assert prediction.mean.shape == (5,)
        assert np.all(prediction.variance > 0)

    @pytest.mark.parametrize("kind", ["rf", "fastcluster"])
    def test_variance_bounds_on_sampled_predictions(self, rng, kind):
        X = rng.standard_normal((120, 3))
        y = np.sin(X[:, 0]) + 0.1 * rng.standard_normal(120)
        noise = 0.05
        ensemble = sample_ensemble(SamplerSpec(kind=kind, seed=4), 30, X, y)
        model = gp_fit(ensemble, y, noise=noise, options=TIGHT, standardize_targets=False)
        X_test = np.vstack([X[:20], 3.0 * rng.standard_normal((80, 3))])
        variance = gp_predict(model, X_test).variance
        assert np.all(variance > 0)
        assert np.all(variance <= 1.0 + noise + 1e-6)

    def test_tiny_noise_interpolates_training_targets(self, rng):
        X = rng.standard_normal((60, 3))
        y = np.sin(X[:, 0]) + X[:, 1]
        singletons, _ = assign_to_centers(X, np.arange(60), [True, True, True])
        coarse = sample_ensemble(SamplerSpec(kind="fastcluster", seed=1), 15, X).partitions
        ensemble = PartitionEnsemble([singletons] * 5 + list(coarse))
        model = gp_fit(ensemble, y, noise=1e-6, options=TIGHT, standardize_targets=False)
        pairing = [ExtendedPartition(p, p.assignments) for p in ensemble.partitions]
        np.testing.assert_allclose(gp_predict(model, pairing).mean, y, rtol=0, atol=1e-4)


class TestEvaluation:
    def test_perfect_predictions(self):
        noise = 0.2
        terms = log_likelihood_terms(np.ones(4), np.ones(4), np.full(4, noise))
        np.testing.assert_allclose(terms, -0.5 * math.log(2 * math.pi * noise))

    def test_metrics_recompute_from_stored_predictions(self, rng):
        X = rng.standard_normal((60, 2))
        y = X[:, 0] + 0.1 * rng.standard_normal(60)
        ensemble = sample_ensemble(SamplerSpec(kind="rf", seed=1), 15, X[:45], y[:45])
        model = gp_fit(ensemble, y[:45], noise=0.05)
        metrics = gp_evaluate(model, X[45:], y[45:])
        assert metrics.mse == pytest.approx(np.mean((y[45:] - metrics.mean) ** 2))
        expected = np.mean(log_likelihood_terms(y[45:], metrics.mean, metrics.variance))
        assert metrics.log_likelihood == pytest.approx(expected)

    def test_constant_prior_mse_is_test_variance(self, rng):
        ensemble = PartitionEnsemble([Partition(np.arange(30))])
        y_train = rng.standard_normal(30)
        model = gp_fit(ensemble, y_train, noise=0.1)
        y_test = rng.standard_normal(10)
        metrics = gp_evaluate(model, [ExtendedPartition(ensemble.partitions[0], np.full(10, -1))], y_test)
        assert metrics.mse == pytest.approx(np.mean((y_test - y_train.mean()) ** 2))

    def test_length_mismatch(self, rng):
        ensemble = PartitionEnsemble([Partition(np.arange(5))])
        model = gp_fit(ensemble, rng.standard_normal(5), noise=0.1)
        with pytest.raises(DimensionError):
            gp_evaluate(model, [ExtendedPartition(ensemble.partitions[0], [0, 1])], np.zeros(3))

    def test_piecewise_steps_are_recovered(self):
        data = synth_piecewise(200, noise=0.1, seed=0)
        spec = SamplerSpec(kind="rf", seed=0, tree=TreeConfig(min_leaf=3))
        ensemble = sample_ensemble(spec, 40, data.X, data.y)
        model = gp_fit(ensemble, data.y, noise=0.05)
        queries = np.array([[0.1], [0.3], [0.6], [0.85]])
        np.testing.assert_allclose(gp_predict(model, queries).mean, data.metadata["levels"], atol=0.5)


class TestKernelPCA:
    def test_single_cluster_has_zero_spectrum(self):
        model = kpca_fit(PartitionEnsemble([Partition(np.zeros(6, dtype=int))]), k=2)
        np.testing.assert_allclose(model.eigenvalues, [0.0, 0.0], atol=1e-12)

    def test_two_equal_clusters(self):
        model = kpca_fit(PartitionEnsemble([Partition([0, 0, 1, 1])]), k=1, tol=1e-12)
        assert model.eigenvalues[0] == pytest.approx(2.0)
        assert abs(model.eigenvectors[:, 0] @ np.array([1, 1, -1, -1]) / 2) == pytest.approx(1.0)

    def test_matches_dense_centered_eigensolver(self):
        ensemble = random_ensemble(11, n=300, m=25)
        model = kpca_fit(ensemble, k=5, tol=1e-10, max_iter=20000)
        K = dense_gram(ensemble)
        H = np.eye(300) - 1.0 / 300
        expected = eigh(H @ K @ H, eigvals_only=True)[::-1][:5]
        np.testing.assert_allclose(model.eigenvalues, expected, rtol=1e-6)

    def test_projecting_training_rows_reproduces_coordinates(self, rng):
        X = rng.standard_normal((120, 3))
        ensemble = sample_ensemble(SamplerSpec(kind="fastcluster", seed=4), 30, X)
        model = kpca_fit(ensemble, k=2, tol=1e-12, max_iter=20000)
        np.testing.assert_allclose(kpca_project(model, X), model.training_coordinates(), atol=1e-6)

    def test_duplicate_row_projects_identically(self, rng):
        X = rng.standard_normal((60, 2))
        y = X.sum(axis=1)
        ensemble = sample_ensemble(SamplerSpec(kind="rf", seed=2), 20, X, y)
        model = kpca_fit(ensemble, k=2)
        coords = kpca_project(model, np.vstack([X[7], X[7]]))
        np.testing.assert_array_equal(coords[0], coords[1])
        np.testing.assert_allclose(coords[0], kpca_project(model, X)[7])

    def test_training_coordinates_are_centered(self, rng):
        ensemble = random_ensemble(5, n=80, m=10)
        coords = kpca_fit(ensemble, k=3, tol=1e-10, max_iter=20000).training_coordinates()
        np.testing.assert_allclose(coords.mean(axis=0), 0.0, atol=1e-8)

    def test_dense_projection_of_training_rows(self, rng):
        X = rng.standard_normal((50, 3))
        kernel = make_dense_kernel("rbf", X, {"lengthscale": 1.5, "amplitude": 1.0})
        model = kpca_fit_dense(kernel, k=3)
        np.testing.assert_allclose(model.project(X), model.training_coordinates(), atol=1e-8)

    def test_linear_kernel_is_plain_pca(self, rng):
        X = rng.standard_normal((40, 3)) * np.array([5.0, 2.0, 0.5])
        model = kpca_fit_dense(make_dense_kernel("linear", X, {"amplitude": 1.0}), k=2)
        Xc = X - X.mean(axis=0)
        singular = np.linalg.svd(Xc, compute_uv=False)
        np.testing.assert_allclose(model.eigenvalues, singular[:2] ** 2, rtol=1e-8)

    def test_partition_kernel_matches_dense_path_projection(self, rng):
        ensemble = random_ensemble(13, n=90, m=12)
        pairing = random_pairing(14, ensemble, n_test=15)
        model = kpca_fit(PartitionKernel(ensemble), k=2, tol=1e-12, max_iter=20000)
        K = dense_gram(ensemble)
        Kx = cross_dense(pairing)
        r = K.mean(axis=1)
        centered = Kx - Kx.mean(axis=1, keepdims=True) - r[None, :] + r.mean()
        expected = centered @ model.eigenvectors / np.sqrt(model.eigenvalues)
        np.testing.assert_allclose(model.project(pairing), expected, atol=1e-8)

    def test_k_out_of_range(self):
        with pytest.raises(ParameterError):
            kpca_fit(random_ensemble(0, n=4, m=2), k=5)


def test_kernel_entry_variance_respects_bound(rng):
    X = rng.standard_normal((20, 2))

    def draw(m, trial):
        return sample_ensemble(SamplerSpec(kind="fastcluster", seed=trial), m, X)

    m = 10
    mean, var = kernel_entry_variance(draw, (0, 1), m, trials=1000)
    assert 0.0 <= mean <= 1.0
    assert var <= 1.2 / (4 * m)


@pytest.mark.slow
@pytest.mark.parametrize("m", [50, 200])
def test_kernel_entry_variance_bound_at_scale(m):
    X = np.random.default_rng(0).standard_normal((20, 2))

    def draw(size, trial):
        return sample_ensemble(SamplerSpec(kind="fastcluster", seed=trial), size, X)

    _, var = kernel_entry_variance(draw, (0, 1), m, trials=1000)
    assert var <= 1.2 / (4 * m)
