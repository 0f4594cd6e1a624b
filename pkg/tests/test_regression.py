import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import grid_lambda_oracle
from gcmtest.errors import DataError
from gcmtest.nofreelunch import f_a
from gcmtest.regression import (
    KNN,
    KRR,
    KernelSpec,
    Linear,
    fit_knn,
    fit_krr,
    fit_linear,
    gram_matrix,
    kernel_diagnostics,
    select_lambda,
)
from gcmtest.simlab import ModelSpec, conditional_means, gen_model

SOBOLEV = KernelSpec("sobolev_first_order")


class TestGramMatrix:
    def test_gaussian_diagonal(self, rng):
        K = gram_matrix(rng.standard_normal((4, 2)))
        np.testing.assert_array_equal(np.diag(K), np.full(4, 0.25))

    def test_gaussian_off_diagonal(self):
        K = gram_matrix([0.0, 1.0])
        assert K[0, 1] == pytest.approx(math.exp(-0.5) / 2, abs=1e-12)
        assert K[0, 1] == pytest.approx(0.30327, abs=1e-5)

    def test_bandwidth(self):
        K = gram_matrix([0.0, 2.0], KernelSpec(bandwidth=2.0))
        assert K[0, 1] == pytest.approx(math.exp(-0.5) / 2)

    def test_sobolev_unit_interval(self):
        K = gram_matrix([0.2, 0.7], SOBOLEV)
        assert K[0, 1] == pytest.approx(0.6)
        assert K[1, 1] == pytest.approx(0.85)

    def test_sobolev_rescales_outside_unit_interval(self):
        K = gram_matrix([-1.0, 0.0, 1.0], SOBOLEV)
        # rescaled to 0, 0.5, 1
        assert K[1, 2] == pytest.approx(1.5 / 3)
        assert K[0, 2] == pytest.approx(1.0 / 3)

    def test_sobolev_rejects_multivariate_z(self, rng):
        with pytest.raises(DataError):
            gram_matrix(rng.standard_normal((5, 2)), SOBOLEV)

    def test_non_finite(self):
        with pytest.raises(DataError):
            gram_matrix([0.0, np.nan])

    def test_invalid_bandwidth(self):
        with pytest.raises(ValueError):
            KernelSpec(bandwidth=0.0)

    @settings(max_examples=30, deadline=None)
    @given(arrays(float, st.tuples(st.integers(2, 30), st.integers(1, 3)),
                  elements=st.floats(-5, 5)))
    def test_psd(self, z):
        for kernel in (KernelSpec(), KernelSpec(bandwidth=0.3)):
            K = gram_matrix(z, kernel)
            np.testing.assert_array_equal(K, K.T)
            w = np.linalg.eigvalsh(K)
            assert w.min() >= -1e-8 * w.max()


class TestSelectLambda:
    def test_single_unit_eigenvalue(self):
        # golden-section on a flat minimum resolves lambda to ~sqrt(machine eps)
        assert select_lambda([1.0], 1) == pytest.approx(2 ** (1 / 3) - 1, abs=1e-7)
        assert grid_lambda_oracle([1.0], 1) == pytest.approx(0.259921, abs=1e-6)

    def test_two_unit_eigenvalues(self):
        assert select_lambda([1.0, 1.0], 2) == pytest.approx(0.259921, abs=1e-6)

    def test_zero_spectrum(self):
        assert select_lambda(np.zeros(5), 5) == 1e-10

    def test_negative_noise_clipped(self):
        assert select_lambda([1.0, -1e-17], 2) == select_lambda([1.0, 0.0], 2)

    def test_matches_grid_oracle_on_random_spectra(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            n = int(rng.integers(1, 12))
            mu = np.sort(rng.exponential(size=n) * rng.choice([0.01, 0.1, 1.0]))[::-1]
            mu = mu / mu.sum() * rng.uniform(0.2, 1.0)
            assert abs(select_lambda(mu, n) - grid_lambda_oracle(mu, n)) < 1e-4

    def test_diagnostics(self, rng):
        d = kernel_diagnostics(rng.standard_normal(40))
        assert np.all(np.diff(d.eigenvalues) <= 0)
        assert np.all(d.eigenvalues >= 0)
        assert d.eigenvalues.sum() == pytest.approx(1.0)
        assert d.lambda_hat > 0


class TestKRR:
    def test_single_point(self):
        fit = fit_krr([0.3], [2.0], lam=0.5)
        assert fit.predictions[0] == pytest.approx(2.0 / 1.5)

    def test_interpolates_as_lambda_vanishes(self):
        z = np.linspace(-2, 2, 6)
        t = np.sin(z)
        fit = fit_krr(z, t, lam=1e-13)
        np.testing.assert_allclose(fit.predictions, t, atol=1e-6)

    def test_dense_solve_oracle(self, rng):
        z = rng.standard_normal((5, 1))
        t = rng.standard_normal(5)
        K = gram_matrix(z)
        u = np.linalg.solve(K + 0.1 * np.eye(5), t)
        fit = fit_krr(z, t, lam=0.1)
        np.testing.assert_allclose(fit.predictions, K @ u, atol=1e-8)
        assert fit.lambda_used == 0.1

    def test_auto_lambda_recorded(self, rng):
        z = rng.standard_normal(30)
        fit = fit_krr(z, z**2)
        assert fit.lambda_used == pytest.approx(kernel_diagnostics(z).lambda_hat)

    def test_residuals_exact(self, rng):
        z, t = rng.standard_normal(20), rng.standard_normal(20)
        fit = fit_krr(z, t)
        assert np.array_equal(fit.residuals, t - fit.predictions)
        assert np.array_equal(fit.residuals + fit.predictions, t) or np.allclose(
            fit.residuals + fit.predictions, t, rtol=0, atol=1e-15
        )

    def test_fit_many_matches_single(self, rng):
        z = rng.standard_normal(25)
        T = rng.standard_normal((25, 2))
        many = KRR().fit_many(z, T)
        for j in range(2):
            np.testing.assert_allclose(many[j].predictions, fit_krr(z, T[:, j]).predictions)

    def test_out_of_sample_matches_in_sample_at_training_points(self, rng):
        z, t = rng.standard_normal(15), rng.standard_normal(15)
        (oos,) = KRR(lam=0.05).fit_predict(z, t, z, t)
        np.testing.assert_allclose(oos.predictions, fit_krr(z, t, lam=0.05).predictions, atol=1e-12)
        assert not oos.in_sample

    def test_loocv_lambda(self, rng):
        z = rng.standard_normal(80)
        fit = fit_krr(z, np.sin(2 * z) + 0.1 * rng.standard_normal(80), lam="loocv")
        assert 1e-10 <= fit.lambda_used <= 1.0

    def test_bad_lambda(self):
        with pytest.raises(ValueError):
            fit_krr([0.0, 1.0], [0.0, 1.0], lam=-1.0)
        with pytest.raises(ValueError):
            fit_krr([0.0, 1.0], [0.0, 1.0], lam="cv")

    def test_mspe_shrinks_with_n(self):
        spec = ModelSpec("a")
        mspe = {}
        for n in (100, 400, 1600):
            errs = []
            for rep in range(3):
                d = gen_model(spec, np.random.default_rng([n, rep]), n)
                fx, _ = conditional_means(spec, d.z_block)
                fit = fit_krr(d.z_block, d.x_block[:, 0])
                errs.append(np.mean((fit.predictions - fx[:, 0]) ** 2))
            mspe[n] = np.mean(errs)
        assert mspe[400] <= 2 * mspe[100]
        assert mspe[1600] <= 2 * mspe[400]


class TestLinear:
    def test_exact_fit(self):
        fit = fit_linear([0.0, 1.0], [0.0, 1.0])
        np.testing.assert_allclose(fit.predictions, [0, 1], atol=1e-12)
        np.testing.assert_allclose(fit.residuals, [0, 0], atol=1e-12)

    def test_constant(self):
        np.testing.assert_allclose(fit_linear([0.0, 1.0, 2.0], [1.0, 1.0, 1.0]).predictions, 1.0)

    def test_normal_equations(self):
        fit = fit_linear([0.0, 1.0, 2.0], [0.0, 1.0, 4.0])
        np.testing.assert_allclose(fit.predictions, [-1 / 3, 5 / 3, 11 / 3], atol=1e-12)

    def test_rank_deficient(self):
        z = np.column_stack([np.arange(5.0), np.arange(5.0)])
        fit = fit_linear(z, 2 * np.arange(5.0) + 1)
        np.testing.assert_allclose(fit.predictions, 2 * np.arange(5.0) + 1, atol=1e-6)

    def test_out_of_sample(self):
        (fit,) = Linear().fit_predict([0.0, 1.0, 2.0], [1.0, 3.0, 5.0], [10.0], [20.0])
        assert fit.predictions[0] == pytest.approx(21.0)
        assert fit.residuals[0] == pytest.approx(-1.0)


class TestKNN:
    def test_two_points(self):
        fit = fit_knn([0.0, 5.0], [1.0, 2.0], k=1)
        np.testing.assert_array_equal(fit.predictions, [2.0, 1.0])

    def test_constant_target(self, rng):
        fit = fit_knn(rng.standard_normal(20), np.full(20, 3.0), k=4)
        np.testing.assert_array_equal(fit.residuals, 0.0)

    def test_hand_enumeration(self):
        fit = fit_knn([0.0, 1.0, 2.0, 10.0], [0.0, 1.0, 2.0, 3.0], k=2)
        assert fit.predictions[3] == pytest.approx(1.5)
        # row 1 (z=1) has neighbours z=0 and z=2 at equal distance
        assert fit.predictions[1] == pytest.approx(1.0)

    def test_ties_prefer_lower_index(self):
        # rows 0 and 2 are both at distance 1 from row 1
        fit = fit_knn([0.0, 1.0, 2.0], [10.0, 0.0, 20.0], k=1)
        assert fit.predictions[1] == 10.0

    def test_k_range(self):
        with pytest.raises(DataError):
            fit_knn([0.0, 1.0], [0.0, 1.0], k=2)
        with pytest.raises(DataError):
            fit_knn([0.0, 1.0], [0.0, 1.0], k=0)

    def test_default_k(self, rng):
        assert KNN()._k(100) == 10


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 25), st.integers(0, 2**32 - 1))
def test_residuals_reconstruct_target(n, seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, 1))
    t = rng.standard_normal(n) * 10
    for backend in (Linear(), KRR(), KRR(lam=0.3), KNN(k=2)):
        fit = backend.fit(z, t)
        assert np.array_equal(fit.residuals, t - fit.predictions)
        assert fit.residuals.shape == (n,)
