"""
Service functions for the penalized estimators: principal component
regression, ridge and generalized ridge, the DPCoA primal estimate, the
Franklin dual estimate and its two-kernel primal counterpart, lasso by
coordinate descent, and compositional KPR.

Every n x n solve goes through a symmetric factorization; p x p systems
are only formed when p <= n.
"""
import logging
import math

import numpy as np
from scipy import linalg

from models.results import FitResult, Method
from models.tables import ResponseVector
from services.compositional_service import aitchison_covariance, clr_transform, replace_zeros, variation_matrix
from utils.errors import ConvergenceError, DomainError, KprError, SchemaError, SingularSystemError
from utils.linalg_utils import (
    cholesky_factor,
    general_solve,
    numerical_rank,
    psd_root,
    spd_solve,
    symmetrize,
    thin_svd,
)
from utils.matio_utils import center_columns

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

LASSO_MAX_SWEEPS = 10_000
LASSO_TOL = 1e-9
LASSO_KKT_TOL = 1e-7


def _values(obj):
    return np.asarray(getattr(obj, "values", obj), dtype=float)


def _check_lambda(lambda_, allow_zero=False):
    lambda_ = float(lambda_)
    if not np.isfinite(lambda_) or lambda_ < 0 or (lambda_ == 0 and not allow_zero):
        raise DomainError(f"lambda must be {'nonnegative' if allow_zero else 'positive'}, got {lambda_}")
    return lambda_


def _check_xy(X, y):
    X, y = _values(X), _values(y)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise SchemaError(f"Design {X.shape} and response {y.shape} do not match")
    return X, y


def _truncated_coefficients(Z, y, k):
    """sum_{j<=k} (u_j'y / s_j) v_j from the SVD of Z"""
    U, s, V = thin_svd(Z)
    rank = numerical_rank(s, Z.shape)
    k = int(k)
    if k < 1 or k > rank:
        raise DomainError(f"Requested {k} components but the design has rank {rank}")
    return V[:, :k] @ ((U[:, :k].T @ y) / s[:k])


def pcr_estimate(X, y, k):
    """Principal component regression on the top-k singular triplets of X"""
    X, y = _check_xy(X, y)
    return FitResult(_truncated_coefficients(X, y, k), 0.0, Method.PCR, components=int(k))


def ridge_estimate(X, y, lambda_):
    """(X'X + lambda I)^-1 X'y, solved in whichever of the primal/dual spaces is smaller"""
    X, y = _check_xy(X, y)
    lambda_ = _check_lambda(lambda_)
    n, p = X.shape
    if p <= n:
        beta = spd_solve(X.T @ X + lambda_ * np.eye(p), X.T @ y)
        return FitResult(beta, lambda_, Method.RIDGE)
    gamma = kernel_ridge_dual(X @ X.T, y, lambda_)
    return FitResult(X.T @ gamma, lambda_, Method.RIDGE, gamma=gamma)


def kernel_ridge_dual(K, y, lambda_):
    """gamma = (K + lambda I)^-1 y"""
    K = _values(K)
    lambda_ = _check_lambda(lambda_)
    return spd_solve(K + lambda_ * np.eye(K.shape[0]), _values(y))


def _taxon_kernel(Q, p):
    Q = _values(Q)
    if Q.shape != (p, p):
        raise SchemaError(f"Taxon kernel has shape {Q.shape}, expected ({p}, {p})")
    return Q


def gridge_estimate(X, y, Q, lambda_):
    """
    Generalized ridge (Tikhonov) estimate (X'X + lambda Q^-1)^-1 X'y.

    Computed as QX'(XQX' + lambda I)^-1 y so Q is never inverted. A
    singular Q receives jitter, the same jitter dpcoa_estimate's factor
    uses, so the two estimates stay related by L.
    """
    X, y = _check_xy(X, y)
    lambda_ = _check_lambda(lambda_)
    _, Q_used = cholesky_factor(_taxon_kernel(Q, X.shape[1]))
    K = symmetrize(X @ Q_used @ X.T)
    gamma = spd_solve(K + lambda_ * np.eye(len(y)), y)
    return FitResult(Q_used @ (X.T @ gamma), lambda_, Method.GRIDGE, gamma=gamma)


def dpcr_estimate(X, y, Q, k):
    """Truncated regression on Z = XL, Q = LL'; beta is in Z coordinates"""
    X, y = _check_xy(X, y)
    L, _ = cholesky_factor(_taxon_kernel(Q, X.shape[1]))
    beta = _truncated_coefficients(X @ L, y, k)
    return FitResult(beta, 0.0, Method.DPCR, loading=L, components=int(k))


def dpcoa_estimate(X, y, Q, lambda_):
    """Primal DPCoA estimate L'X'(XQX' + lambda I)^-1 y with Q = LL'"""
    X, y = _check_xy(X, y)
    lambda_ = _check_lambda(lambda_)
    L, _ = cholesky_factor(_taxon_kernel(Q, X.shape[1]))
    Z = X @ L
    gamma = kernel_ridge_dual(symmetrize(Z @ Z.T), y, lambda_)
    return FitResult(Z.T @ gamma, lambda_, Method.DPCOA, gamma=gamma, loading=L)


def franklin_dual(K, H, y, lambda_):
    """
    Franklin dual estimate gamma = (K + lambda H^-1)^-1 y.

    Evaluated without inverting H: with H = RR',
    (HK + lambda I)^-1 H y = R (R'KR + lambda I)^-1 R'y,
    a symmetric system that stays well defined for singular H.

    Raises:
        NotPSDError: H has an eigenvalue below -1e-8 * its largest
        SingularSystemError: HK + lambda I is numerically singular
    """
    K, H, y = _values(K), _values(H), _values(y)
    lambda_ = _check_lambda(lambda_)
    n = len(y)
    if K.shape != (n, n) or H.shape != (n, n):
        raise SchemaError(f"Kernels {K.shape} and {H.shape} do not match {n} samples")
    R = psd_root(H)
    try:
        return R @ spd_solve(symmetrize(R.T @ K @ R) + lambda_ * np.eye(n), R.T @ y)
    except SingularSystemError:
        logger.warning("Symmetric Franklin system failed; falling back to the general solve of (HK + lambda I)")
        return general_solve(H @ K + lambda_ * np.eye(n), H @ y)


def _inverse_pd(M):
    """Inverse of a positive definite matrix, jittered if singular"""
    L, _ = cholesky_factor(M)
    return linalg.cho_solve((L, True), np.eye(M.shape[0]))


def franklin_forms(K, H, y, lambda_):
    """
    The equivalent closed forms of the Franklin dual estimate.

    Returns a dict with:
        inverse:        (K + lambda H^-1)^-1 y
        k_inverse_norm: normal equations of ||y - K g||^2_{K^-1} + lambda ||g||^2_{H^-1}
        h_norm:         normal equations of ||y - K g||^2_H + lambda ||g||^2_K
        h_free:         (HK + lambda I)^-1 H y
        right_push:     H (KH + lambda I)^-1 y
    """
    K, H, y = _values(K), _values(H), _values(y)
    lambda_ = _check_lambda(lambda_)
    n = len(y)
    eye = np.eye(n)
    H_inv = _inverse_pd(H)
    K_inv = _inverse_pd(K)
    return {
        'inverse': general_solve(K + lambda_ * H_inv, y),
        'k_inverse_norm': general_solve(K @ K_inv @ K + lambda_ * H_inv, K @ K_inv @ y),
        'h_norm': general_solve(K @ H @ K + lambda_ * K, K @ H @ y),
        'h_free': general_solve(H @ K + lambda_ * eye, H @ y),
        'right_push': H @ general_solve(K @ H + lambda_ * eye, y),
    }


def franklin_spectral(K, H, y, lambda_):
    """
    Franklin estimate from the generalized eigenvectors of (K, H^-1).

    With W'KW = diag(s) and W'H^-1 W = I the estimate is
    sum_k (w_k'y / (s_k + lambda)) w_k. Returns (gamma, s, W); the columns
    of W are eigenvectors of HK.
    """
    K, y = _values(K), _values(y)
    lambda_ = _check_lambda(lambda_)
    H_inv = _inverse_pd(_values(H))
    s, W = linalg.eigh(symmetrize(K), symmetrize(H_inv))
    gamma = W @ ((W.T @ y) / (s + lambda_))
    return gamma, s, W


def tikhonov_dual(K, H, y, lambda_):
    """Dual Tikhonov estimate (K^2 + lambda H^-1)^-1 K y, as (HK^2 + lambda I)^-1 HKy"""
    K, H, y = _values(K), _values(H), _values(y)
    lambda_ = _check_lambda(lambda_)
    return general_solve(H @ K @ K + lambda_ * np.eye(len(y)), H @ K @ y)


def kpr_two_kernel(X, y, Q, H, lambda_):
    """
    Two-kernel estimate argmin ||y - X b||^2_H + lambda ||b||^2_{Q^-1}.

    Obtained from the dual as beta = QX' gamma with gamma the Franklin
    estimate for K_Q = XQX'.
    """
    X, y = _check_xy(X, y)
    lambda_ = _check_lambda(lambda_)
    _, Q_used = cholesky_factor(_taxon_kernel(Q, X.shape[1]))
    gamma = franklin_dual(symmetrize(X @ Q_used @ X.T), H, y, lambda_)
    return FitResult(Q_used @ (X.T @ gamma), lambda_, Method.KPR2, gamma=gamma)


def soft_threshold(x, t):
    return math.copysign(max(abs(x) - t, 0.0), x)


def lasso_kkt_residual(X, y, beta, lambda_):
    """Largest violation of the lasso optimality conditions"""
    X, y = _check_xy(X, y)
    return _kkt_violation(X.T @ (y - X @ beta) / len(y), np.asarray(beta, dtype=float), lambda_)


def _kkt_violation(grad, beta, lambda_):
    active = beta != 0
    violation = np.zeros_like(beta)
    violation[active] = np.abs(grad[active] - lambda_ * np.sign(beta[active]))
    violation[~active] = np.maximum(np.abs(grad[~active]) - lambda_, 0.0)
    return float(violation.max(initial=0.0))


def _polish_active_set(gram, xty, beta, lambda_):
    """
    Exact lasso solution on the current support and signs, or None.

    Solves gram_AA b = xty_A - lambda * s_A and keeps the result only when
    the signs are unchanged and the full KKT conditions hold.
    """
    active = np.flatnonzero(beta)
    signs = np.sign(beta[active])
    solution = linalg.lstsq(gram[np.ix_(active, active)], xty[active] - lambda_ * signs)[0]
    if np.any(np.sign(solution) != signs):
        return None
    candidate = np.zeros_like(beta)
    candidate[active] = solution
    if _kkt_violation(xty - gram @ candidate, candidate, lambda_) > LASSO_KKT_TOL:
        return None
    return candidate


def _cd_sweep(gram, diag, grad, beta, lambda_, coords):
    """One coordinate descent pass over coords; updates beta and grad in place, returns the largest step"""
    largest_step = 0.0
    for j in coords:
        old = beta[j]
        new = soft_threshold(grad[j] + diag[j] * old, lambda_) / diag[j]
        if new != old:
            step = new - old
            grad -= gram[:, j] * step
            beta[j] = new
            largest_step = max(largest_step, abs(step))
    return largest_step


def lasso_cd(X, y, lambda_, beta_start=None, max_sweeps=LASSO_MAX_SWEEPS, tol=LASSO_TOL):
    """
    Lasso (1/2n)||y - X b||^2 + lambda ||b||_1 by cyclic coordinate descent.

    Works on the covariance form: the gradient X'(y - Xb)/n is kept up to
    date with one column of X'X/n per coefficient change. After each full
    sweep that moves something, sweeps cycle over the nonzero coefficients
    only until they settle. Stops once a full sweep moves no coefficient by
    more than tol and the KKT residual is within 1e-7. Once the support and
    signs repeat between full sweeps, the exact solution on that support is
    tried and returned if it is optimal. max_sweeps counts full and
    active-set sweeps alike.

    Raises:
        ConvergenceError: max_sweeps exhausted
    """
    X, y = _check_xy(X, y)
    lambda_ = _check_lambda(lambda_, allow_zero=True)
    n, p = X.shape
    gram = X.T @ X / n
    xty = X.T @ y / n
    diag = np.diag(gram).copy()
    beta = np.zeros(p) if beta_start is None else np.array(beta_start, dtype=float)
    beta[diag == 0.0] = 0.0
    grad = xty - gram @ beta
    usable = np.flatnonzero(diag > 0.0)
    pattern = None

    sweep = 0
    while sweep < max_sweeps:
        sweep += 1
        if _cd_sweep(gram, diag, grad, beta, lambda_, usable) <= tol:
            # refresh to drop accumulated rounding before the optimality check
            grad = xty - gram @ beta
            if _kkt_violation(grad, beta, lambda_) <= LASSO_KKT_TOL:
                logger.debug(f"Lasso converged in {sweep} sweeps at lambda={lambda_:.4g}")
                return FitResult(beta, lambda_, Method.LASSO)
        signs = np.sign(beta)
        if pattern is not None and np.any(signs) and np.array_equal(signs, pattern):
            polished = _polish_active_set(gram, xty, beta, lambda_)
            if polished is not None:
                logger.debug(f"Lasso support settled after {sweep} sweeps at lambda={lambda_:.4g}")
                return FitResult(polished, lambda_, Method.LASSO)
        pattern = signs

        active = np.flatnonzero(beta)
        while active.size and sweep < max_sweeps:
            sweep += 1
            if _cd_sweep(gram, diag, grad, beta, lambda_, active) <= tol:
                break

    logger.error(f"Lasso did not converge in {max_sweeps} sweeps at lambda={lambda_:.4g}")
    raise ConvergenceError(f"Lasso did not converge in {max_sweeps} sweeps at lambda={lambda_:.4g}")


def lasso_lambda_max(X, y):
    """Smallest lambda at which the lasso solution is zero: max_j |X_j'y| / n"""
    X, y = _check_xy(X, y)
    return float(np.max(np.abs(X.T @ y)) / len(y))


def lasso_path(X, y, lambdas):
    """Lasso fits along a descending grid, each warm-started from the previous"""
    X, y = _check_xy(X, y)
    fits = []
    beta = None
    for lambda_ in lambdas:
        fit = lasso_cd(X, y, lambda_, beta_start=beta)
        beta = fit.beta
        fits.append(fit)
    return fits


def compositional_design(X_raw, zero_replacement=None):
    """
    Design and taxon kernel for compositional KPR.

    Returns (X_tilde, C): the column-centered CLR table and the Aitchison
    covariance kernel from the variation matrix of the zero-replaced
    compositions.
    """
    positive = replace_zeros(X_raw, zero_replacement)
    return center_columns(clr_transform(positive)), aitchison_covariance(variation_matrix(positive))


def comp_kpr(X_raw, y, lambda_, zero_replacement=None, covariance=None):
    """
    Compositional KPR: generalized ridge on CLR data with Q = C.

    Args:
        X_raw (AbundanceTable): Counts or proportions
        y (ResponseVector or array-like): Response
        lambda_ (float): Tuning parameter
        zero_replacement (float, optional): Pseudocount for zeros
        covariance (array-like, optional): Override for C
    """
    X_tilde, C = compositional_design(X_raw, zero_replacement)
    Q = C.values if covariance is None else _values(covariance)
    fit = gridge_estimate(X_tilde.values, y, Q, lambda_)
    return FitResult(fit.beta, fit.lambda_, Method.COMP_KPR, gamma=fit.gamma)


def predict_values(fit, X_new):
    """X_new beta (X_new L beta for fits in XL coordinates) as an array"""
    X_new = _values(X_new)
    if X_new.ndim != 2 or X_new.shape[1] != fit.p:
        raise SchemaError(f"New design has {X_new.shape[-1]} columns, fit has {fit.p} coefficients")
    return X_new @ fit.effective_beta()


def predict(fit, X_new):
    """Predicted response for the rows of an AbundanceTable"""
    return ResponseVector(X_new.sample_ids, predict_values(fit, X_new))


def fit_with_spec(spec, X, y, lambda_, h_kernel=None):
    """
    Fit the estimator described by a MethodSpec.

    Args:
        spec (MethodSpec): Method and fixed kernels
        X, y: Design and response (arrays)
        lambda_ (float): Tuning parameter (ignored by pcr/dpcr)
        h_kernel (array-like, optional): Sample kernel restricted to the rows of X;
            defaults to spec.h_kernel
    """
    H = spec.h_kernel if h_kernel is None else h_kernel
    method = spec.method
    try:
        if method is Method.PCR:
            return pcr_estimate(X, y, spec.components)
        if method is Method.RIDGE:
            return ridge_estimate(X, y, lambda_)
        if method in (Method.GRIDGE, Method.COMP_KPR):
            fit = gridge_estimate(X, y, spec.q_kernel if spec.q_kernel is not None else np.eye(_values(X).shape[1]), lambda_)
            return fit if method is Method.GRIDGE else FitResult(fit.beta, fit.lambda_, method, gamma=fit.gamma)
        if method is Method.DPCR:
            return dpcr_estimate(X, y, spec.q_kernel, spec.components)
        if method is Method.DPCOA:
            return dpcoa_estimate(X, y, spec.q_kernel, lambda_)
        if method is Method.FRANKLIN:
            X_arr = _values(X)
            gamma = franklin_dual(X_arr @ X_arr.T, H, y, lambda_)
            return FitResult(X_arr.T @ gamma, lambda_, Method.FRANKLIN, gamma=gamma)
        if method is Method.KPR2:
            Q = spec.q_kernel if spec.q_kernel is not None else np.eye(_values(X).shape[1])
            return kpr_two_kernel(X, y, Q, H, lambda_)
        if method is Method.LASSO:
            return lasso_cd(X, y, lambda_)
    except KprError as e:
        logger.error(f"Error fitting {method.value} at lambda={lambda_}: {e}")
        raise
    raise DomainError(f"Unsupported method {method.value}")
