import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import linalg

from models.results import Method, MethodSpec
from models.tables import AbundanceTable
from services.compositional_service import clr_transform, replace_zeros
from services.estimator_service import (
    comp_kpr,
    dpcoa_estimate,
    dpcr_estimate,
    fit_with_spec,
    franklin_dual,
    franklin_forms,
    franklin_spectral,
    gridge_estimate,
    kernel_ridge_dual,
    kpr_two_kernel,
    lasso_cd,
    lasso_kkt_residual,
    lasso_lambda_max,
    lasso_path,
    pcr_estimate,
    predict,
    predict_values,
    ridge_estimate,
    tikhonov_dual,
)
from tests.conftest import random_spd, relative_error
from utils.errors import ConvergenceError, DomainError, NotPSDError, SchemaError, UsageError
from utils.matio_utils import center_columns


def _problem(seed, n, p):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    X -= X.mean(axis=0)
    return rng, X, rng.standard_normal(n)


class TestPcr:
    def test_full_rank_square_is_ols(self, rng):
        X = rng.standard_normal((4, 4))
        y = rng.standard_normal(4)
        fit = pcr_estimate(X, y, 4)
        assert_allclose(fit.beta, np.linalg.solve(X, y), rtol=1e-8, atol=1e-10)

    def test_truncation_matches_explicit_svd(self):
        X = np.array([[3.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
        y = np.array([1.0, 2.0, -1.0, 0.5])
        U, s, Vt = np.linalg.svd(X, full_matrices=False)
        expected = Vt[0] * (U[:, 0] @ y) / s[0]
        assert_allclose(pcr_estimate(X, y, 1).beta, expected, atol=1e-12)

    def test_response_orthogonal_to_components(self):
        X = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
        y = np.array([0.0, 0.0, 1.0])
        assert_allclose(pcr_estimate(X, y, 2).beta, 0.0, atol=1e-12)

    def test_too_many_components(self):
        X = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
        with pytest.raises(DomainError):
            pcr_estimate(X, np.ones(3), 2)


class TestRidge:
    def test_single_column_closed_form(self):
        fit = ridge_estimate(np.array([[1.0], [-1.0]]), np.array([1.0, -1.0]), 2.0)
        assert_allclose(fit.beta, [0.5])

    def test_dual_branch_matches_normal_equations(self):
        _, X, y = _problem(1, 5, 9)
        expected = np.linalg.solve(X.T @ X + 0.7 * np.eye(9), X.T @ y)
        fit = ridge_estimate(X, y, 0.7)
        assert fit.gamma is not None
        assert_allclose(fit.beta, expected, rtol=1e-9)

    def test_small_lambda_approaches_ols(self):
        _, X, y = _problem(2, 30, 4)
        ols = np.linalg.lstsq(X, y, rcond=None)[0]
        assert_allclose(ridge_estimate(X, y, 1e-12).beta, ols, atol=1e-8)

    def test_norm_decreases_with_lambda(self):
        _, X, y = _problem(3, 20, 6)
        norms = [np.linalg.norm(ridge_estimate(X, y, lam).beta) for lam in [0.01, 0.1, 1.0, 10.0, 100.0]]
        assert all(a > b for a, b in zip(norms, norms[1:]))

    def test_spectral_filter(self):
        _, X, y = _problem(4, 12, 5)
        lam = 0.8
        U, s, Vt = np.linalg.svd(X, full_matrices=False)
        expected = Vt.T @ ((s ** 2 / (s ** 2 + lam)) * (U.T @ y) / s)
        assert_allclose(ridge_estimate(X, y, lam).beta, expected, rtol=1e-9)

    @pytest.mark.parametrize("lam", [0.0, -1.0, np.inf])
    def test_rejects_bad_lambda(self, lam):
        with pytest.raises(DomainError):
            ridge_estimate(np.eye(2), np.ones(2), lam)


class TestGeneralizedRidge:
    def test_identity_kernel_is_ridge(self):
        _, X, y = _problem(5, 10, 4)
        assert_allclose(gridge_estimate(X, y, np.eye(4), 1.5).beta, ridge_estimate(X, y, 1.5).beta, rtol=1e-10)

    def test_scaled_identity(self):
        _, X, y = _problem(6, 10, 4)
        assert_allclose(gridge_estimate(X, y, 3.0 * np.eye(4), 1.5).beta, ridge_estimate(X, y, 0.5).beta, rtol=1e-10)

    def test_matches_explicit_inverse(self):
        rng, X, y = _problem(7, 8, 5)
        Q = random_spd(rng, 5)
        expected = np.linalg.solve(X.T @ X + 0.3 * np.linalg.inv(Q), X.T @ y)
        assert relative_error(gridge_estimate(X, y, Q, 0.3).beta, expected) <= 1e-8

    def test_shrinkage_in_q_inverse_norm(self):
        rng, X, y = _problem(8, 15, 5)
        Q = random_spd(rng, 5)
        Q_inv = np.linalg.inv(Q)
        norms = [b @ Q_inv @ b for b in (gridge_estimate(X, y, Q, lam).beta for lam in [0.01, 0.1, 1.0, 10.0])]
        assert all(a >= b for a, b in zip(norms, norms[1:]))

    def test_spectral_filter_through_cholesky(self):
        rng, X, y = _problem(9, 10, 6)
        Q = random_spd(rng, 6)
        lam = 2.0
        L = linalg.cholesky(Q, lower=True)
        U, s, Vt = np.linalg.svd(X @ L, full_matrices=False)
        expected = L @ Vt.T @ ((s ** 2 / (s ** 2 + lam)) * (U.T @ y) / s)
        assert relative_error(gridge_estimate(X, y, Q, lam).beta, expected) <= 1e-8

    def test_kernel_shape_checked(self):
        _, X, y = _problem(10, 6, 3)
        with pytest.raises(SchemaError):
            gridge_estimate(X, y, np.eye(4), 1.0)


class TestDpcoa:
    @pytest.mark.parametrize("seed", range(20))
    def test_cholesky_relation_to_gridge(self, seed):
        rng, X, y = _problem(seed, 9, 5)
        Q = random_spd(rng, 5)
        lam = [0.01, 1.0, 100.0][seed % 3]
        dpcoa = dpcoa_estimate(X, y, Q, lam)
        L = linalg.cholesky(Q, lower=True)
        assert relative_error(L @ dpcoa.beta, gridge_estimate(X, y, Q, lam).beta) <= 1e-8
        assert_allclose(dpcoa.effective_beta(), L @ dpcoa.beta)

    def test_identity_kernel_is_kernel_ridge(self):
        _, X, y = _problem(11, 7, 10)
        fit = dpcoa_estimate(X, y, np.eye(10), 0.4)
        assert_allclose(fit.beta, X.T @ np.linalg.solve(X @ X.T + 0.4 * np.eye(7), y), rtol=1e-9)
        assert_allclose(fit.gamma, kernel_ridge_dual(X @ X.T, y, 0.4), rtol=1e-12)
        assert_allclose(fit.beta, ridge_estimate(X, y, 0.4).beta, rtol=1e-9)

    def test_dpcr_identity_is_pcr(self):
        _, X, y = _problem(12, 8, 4)
        assert_allclose(dpcr_estimate(X, y, np.eye(4), 2).beta, pcr_estimate(X, y, 2).beta, atol=1e-12)

    def test_dpcr_matches_svd_of_xl(self):
        rng, X, y = _problem(13, 4, 3)
        Q = random_spd(rng, 3)
        L = linalg.cholesky(Q, lower=True)
        U, s, Vt = np.linalg.svd(X @ L, full_matrices=False)
        expected = Vt[0] * (U[:, 0] @ y) / s[0]
        fit = dpcr_estimate(X, y, Q, 1)
        assert_allclose(fit.beta, expected, atol=1e-12)
        assert_allclose(fit.loading, L)


class TestFranklin:
    def test_identity_h_is_kernel_ridge(self):
        _, X, y = _problem(14, 8, 5)
        gamma = franklin_dual(X @ X.T, np.eye(8), y, 0.5)
        assert_allclose(gamma, np.linalg.solve(X @ X.T + 0.5 * np.eye(8), y), rtol=1e-10)
        assert_allclose(X.T @ gamma, ridge_estimate(X, y, 0.5).beta, rtol=1e-9)

    def test_zero_k(self, rng):
        H = random_spd(rng, 6)
        y = rng.standard_normal(6)
        assert_allclose(franklin_dual(np.zeros((6, 6)), H, y, 2.0), H @ y / 2.0, rtol=1e-10)

    def test_matches_inverse_form(self, rng):
        K, H = random_spd(rng, 6), random_spd(rng, 6)
        y = rng.standard_normal(6)
        expected = np.linalg.solve(K + 0.7 * np.linalg.inv(H), y)
        assert relative_error(franklin_dual(K, H, y, 0.7), expected) <= 1e-8

    def test_singular_h_is_allowed(self, rng):
        A = rng.standard_normal((6, 2))
        H = A @ A.T
        K = random_spd(rng, 6)
        y = rng.standard_normal(6)
        gamma = franklin_dual(K, H, y, 1.0)
        assert_allclose(gamma, np.linalg.solve(H @ K + np.eye(6), H @ y), atol=1e-10)

    @pytest.mark.parametrize("seed", range(200))
    def test_equivalent_forms_agree(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 13))
        K, H = random_spd(rng, n), random_spd(rng, n)
        y = rng.standard_normal(n)
        lam = [0.01, 1.0, 100.0][seed % 3]
        reference = franklin_dual(K, H, y, lam)
        for name, gamma in franklin_forms(K, H, y, lam).items():
            assert relative_error(gamma, reference) <= 1e-8, name

    def test_spectral_form_and_eigenvectors_of_hk(self, rng):
        K, H = random_spd(rng, 7), random_spd(rng, 7)
        y = rng.standard_normal(7)
        gamma, s, W = franklin_spectral(K, H, y, 0.9)
        assert relative_error(gamma, franklin_dual(K, H, y, 0.9)) <= 1e-8
        assert relative_error(H @ K @ W, W * s) <= 1e-8
        # coordinates of gamma in the eigenbasis are the filtered projections
        coefficients = np.linalg.solve(W, gamma)
        assert_allclose(coefficients, (W.T @ y) / (s + 0.9), rtol=1e-7, atol=1e-12)

    def test_tikhonov_dual(self, rng):
        K, H = random_spd(rng, 5), random_spd(rng, 5)
        y = rng.standard_normal(5)
        expected = np.linalg.solve(K @ K + 0.4 * np.linalg.inv(H), K @ y)
        assert relative_error(tikhonov_dual(K, H, y, 0.4), expected) <= 1e-8

    def test_indefinite_h_is_rejected(self, rng):
        K = random_spd(rng, 4)
        with pytest.raises(NotPSDError):
            franklin_dual(K, np.diag([1.0, 2.0, 1.0, -0.5]), rng.standard_normal(4), 1.0)

    def test_rounding_level_negative_eigenvalue_is_clipped(self, rng):
        K = random_spd(rng, 4)
        y = rng.standard_normal(4)
        H = np.diag([1.0, 2.0, 1.0, -1e-12])
        assert_allclose(franklin_dual(K, H, y, 1.0), franklin_dual(K, np.diag([1.0, 2.0, 1.0, 0.0]), y, 1.0),
                        atol=1e-10)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(SchemaError):
            franklin_dual(np.eye(3), np.eye(4), np.ones(3), 1.0)


class TestTwoKernel:
    @pytest.mark.parametrize("seed", range(200))
    def test_primal_dual_relation(self, seed):
        rng = np.random.default_rng(1000 + seed)
        n, p = int(rng.integers(4, 13)), int(rng.integers(2, 9))
        X = rng.standard_normal((n, p))
        y = rng.standard_normal(n)
        Q, H = random_spd(rng, p), random_spd(rng, n)
        lam = [0.01, 1.0, 100.0][seed % 3]
        fit = kpr_two_kernel(X, y, Q, H, lam)
        expected = Q @ X.T @ franklin_dual(X @ Q @ X.T, H, y, lam)
        assert relative_error(fit.beta, expected) <= 1e-8
        oracle = np.linalg.solve(X.T @ H @ X + lam * np.linalg.inv(Q), X.T @ H @ y)
        assert relative_error(fit.beta, oracle) <= 1e-8

    def test_reductions(self):
        _, X, y = _problem(15, 9, 4)
        ridge = ridge_estimate(X, y, 0.6).beta
        gridge = gridge_estimate(X, y, np.eye(4), 0.6).beta
        two = kpr_two_kernel(X, y, np.eye(4), np.eye(9), 0.6).beta
        assert relative_error(two, ridge) <= 1e-10
        assert relative_error(gridge, ridge) <= 1e-10

    def test_identity_h_is_gridge(self, rng):
        X = rng.standard_normal((8, 5))
        y = rng.standard_normal(8)
        Q = random_spd(rng, 5)
        assert relative_error(kpr_two_kernel(X, y, Q, np.eye(8), 1.1).beta,
                              gridge_estimate(X, y, Q, 1.1).beta) <= 1e-10


class TestLasso:
    def test_soft_threshold_closed_form(self):
        fit = lasso_cd(np.array([[1.0], [-1.0]]), np.array([2.0, -2.0]), 0.5)
        assert_allclose(fit.beta, [1.5])

    def test_null_threshold(self):
        _, X, y = _problem(16, 25, 8)
        top = lasso_lambda_max(X, y)
        assert np.all(lasso_cd(X, y, top).beta == 0.0)
        assert np.all(lasso_cd(X, y, 2 * top).beta == 0.0)
        assert np.any(lasso_cd(X, y, 0.9 * top).beta != 0.0)

    def test_zero_lambda_is_ols(self):
        _, X, y = _problem(17, 30, 4)
        ols = np.linalg.lstsq(X, y, rcond=None)[0]
        assert_allclose(lasso_cd(X, y, 0.0).beta, ols, atol=1e-6)

    @pytest.mark.parametrize("seed", range(100))
    def test_kkt_conditions(self, seed):
        rng = np.random.default_rng(2000 + seed)
        n, p = int(rng.integers(10, 40)), int(rng.integers(3, 30))
        X = rng.standard_normal((n, p))
        y = X[:, 0] - 2 * X[:, -1] + rng.standard_normal(n)
        lam = lasso_lambda_max(X, y) * rng.uniform(0.05, 0.9)
        fit = lasso_cd(X, y, lam)
        assert lasso_kkt_residual(X, y, fit.beta, lam) <= 1e-7

    def test_path_matches_cold_starts(self):
        _, X, y = _problem(18, 30, 10)
        grid = lasso_lambda_max(X, y) * np.geomspace(1.0, 0.01, 8)
        for warm, lam in zip(lasso_path(X, y, grid), grid):
            assert_allclose(warm.beta, lasso_cd(X, y, lam).beta, atol=1e-6)

    def test_correlated_columns_of_mixed_scale(self, rng):
        latent = rng.standard_normal((40, 3))
        scales = np.geomspace(1.0, 1e-3, 12)
        X = (latent @ rng.standard_normal((3, 12)) + 0.05 * rng.standard_normal((40, 12))) * scales
        X -= X.mean(axis=0)
        y = X[:, 0] / scales[0] + X[:, 7] / scales[7] + 0.1 * rng.standard_normal(40)
        for ratio in (0.5, 0.05, 1e-3):
            lam = ratio * lasso_lambda_max(X, y)
            fit = lasso_cd(X, y, lam)
            assert lasso_kkt_residual(X, y, fit.beta, lam) <= 1e-7

    def test_sweep_budget(self):
        _, X, y = _problem(19, 20, 5)
        with pytest.raises(ConvergenceError):
            lasso_cd(X, y, 0.1 * lasso_lambda_max(X, y), max_sweeps=1)


class TestCompositional:
    def _raw(self, rng, n=10, p=4):
        values = rng.uniform(0.5, 5.0, size=(n, p))
        return AbundanceTable([f"s{i}" for i in range(n)], [f"t{k}" for k in range(p)], values)

    def test_identity_covariance_is_ridge_on_clr(self, rng):
        X_raw = self._raw(rng)
        y = rng.standard_normal(X_raw.n)
        design = center_columns(clr_transform(X_raw)).values
        fit = comp_kpr(X_raw, y, 0.5, covariance=np.eye(X_raw.p))
        assert_allclose(fit.beta, ridge_estimate(design, y, 0.5).beta, rtol=1e-9)
        assert fit.method is Method.COMP_KPR

    def test_two_taxa_against_hand_built_kernel(self):
        values = np.array([[1.0, 2.0], [3.0, 1.0], [2.0, 2.0], [1.0, 4.0]])
        X_raw = AbundanceTable(["a", "b", "c", "d"], ["u", "v"], values)
        y = np.array([0.5, -1.0, 0.2, 1.5])
        log_ratio = np.log(values[:, 0] / values[:, 1])
        t = np.var(log_ratio, ddof=1) / 2.0
        C = t / 4.0 * np.array([[1.0, -1.0], [-1.0, 1.0]])
        half = log_ratio / 2.0
        design = np.column_stack([half - half.mean(), -(half - half.mean())])
        expected = C @ design.T @ np.linalg.solve(design @ C @ design.T + 0.3 * np.eye(4), y)
        assert_allclose(comp_kpr(X_raw, y, 0.3).beta, expected, rtol=1e-6)

    def test_invariant_to_sample_rescaling(self, rng):
        X_raw = self._raw(rng)
        y = rng.standard_normal(X_raw.n)
        scaled = X_raw.with_values(X_raw.values * rng.uniform(0.1, 10.0, size=(X_raw.n, 1)))
        assert_allclose(comp_kpr(scaled, y, 0.2).beta, comp_kpr(X_raw, y, 0.2).beta, rtol=1e-8, atol=1e-12)

    def test_zeros_are_replaced(self):
        values = np.array([[0.0, 2.0, 1.0], [3.0, 1.0, 0.0], [2.0, 2.0, 2.0], [1.0, 4.0, 1.0]])
        X_raw = AbundanceTable(["a", "b", "c", "d"], ["u", "v", "w"], values)
        fit = comp_kpr(X_raw, np.array([1.0, 0.0, -1.0, 0.5]), 0.1)
        assert np.all(np.isfinite(fit.beta))
        assert replace_zeros(X_raw).values.min() > 0


class TestPredict:
    def test_zero_beta(self, toy_table):
        fit = ridge_estimate(np.eye(3), np.zeros(3), 1.0)
        assert_allclose(predict(fit, toy_table).values, 0.0)

    def test_identity_design(self):
        fit = ridge_estimate(np.eye(3), np.array([2.0, -4.0, 6.0]), 1.0)
        assert_allclose(predict_values(fit, np.eye(3)), fit.beta)

    def test_hand_product(self, toy_table, toy_response):
        fit = ridge_estimate(toy_table.values, toy_response.values, 1.0)
        prediction = predict(fit, toy_table)
        assert prediction.sample_ids == toy_table.sample_ids
        assert_allclose(prediction.values, toy_table.values @ fit.beta)

    def test_dpcoa_predicts_through_loading(self, rng):
        X = rng.standard_normal((6, 3))
        Q = random_spd(rng, 3)
        fit = dpcoa_estimate(X, rng.standard_normal(6), Q, 1.0)
        assert_allclose(predict_values(fit, X), X @ fit.loading @ fit.beta)

    def test_column_mismatch(self, toy_table):
        fit = ridge_estimate(np.eye(2), np.ones(2), 1.0)
        with pytest.raises(SchemaError):
            predict(fit, toy_table)


class TestFitWithSpec:
    def test_dispatch_matches_direct_calls(self, rng):
        X = rng.standard_normal((8, 4))
        y = rng.standard_normal(8)
        Q, H = random_spd(rng, 4), random_spd(rng, 8)
        cases = [
            (MethodSpec(Method.RIDGE), ridge_estimate(X, y, 0.5)),
            (MethodSpec(Method.GRIDGE, q_kernel=Q), gridge_estimate(X, y, Q, 0.5)),
            (MethodSpec(Method.DPCOA, q_kernel=Q), dpcoa_estimate(X, y, Q, 0.5)),
            (MethodSpec(Method.KPR2, q_kernel=Q, h_kernel=H), kpr_two_kernel(X, y, Q, H, 0.5)),
            (MethodSpec(Method.LASSO), lasso_cd(X, y, 0.5)),
            (MethodSpec(Method.PCR, components=2), pcr_estimate(X, y, 2)),
        ]
        for spec, expected in cases:
            assert_allclose(fit_with_spec(spec, X, y, 0.5).beta, expected.beta, rtol=1e-12, atol=1e-14)

    def test_franklin_primal_coefficients(self, rng):
        X = rng.standard_normal((7, 3))
        y = rng.standard_normal(7)
        H = random_spd(rng, 7)
        fit = fit_with_spec(MethodSpec(Method.FRANKLIN, h_kernel=H), X, y, 0.8)
        assert_allclose(fit.beta, X.T @ franklin_dual(X @ X.T, H, y, 0.8))

    def test_missing_kernel_is_usage_error(self):
        with pytest.raises(UsageError):
            MethodSpec(Method.KPR2, q_kernel=np.eye(2))
