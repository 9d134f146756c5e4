"""
Service functions for K-fold cross-validation over a lambda grid, with
CV-min and CV-1se selection and optional H-weighted test error.
"""
import logging

import numpy as np
from joblib import Parallel, delayed

from models.results import CvResult, Method, TuningRule
from services.estimator_service import fit_with_spec, lasso_lambda_max, lasso_path, predict_values
from utils.errors import DomainError, KprError, UsageError

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

UNTUNED_METHODS = (Method.PCR, Method.DPCR)
# lasso grid floor when p > n
LASSO_WIDE_RATIO = 1e-2


def kfold_split(n, k, seed):
    """
    Balanced fold index per sample.

    A seeded permutation deals samples round-robin into k folds, so fold
    sizes differ by at most one.
    """
    n, k = int(n), int(k)
    if k < 2 or k > n:
        raise DomainError(f"Cannot split {n} samples into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=int)
    folds[perm] = np.arange(n) % k
    return folds


def _grid_scale(X, spec):
    """
    Mean eigenvalue of the n x n operator lambda competes with.

    That is trace(K)/n for K = XX' (ridge), XQX' (gridge, dpcoa, comp_kpr)
    or HXQX' (kpr2, franklin; Q = I when absent).
    """
    n = X.shape[0]
    Q = spec.q_kernel if spec.q_kernel is not None and spec.method is not Method.RIDGE else None
    K = X @ X.T if Q is None else X @ Q @ X.T
    if spec.h_kernel is not None and spec.method in (Method.KPR2, Method.FRANKLIN):
        trace = float(np.sum(spec.h_kernel * K))
    else:
        trace = float(np.trace(K))
    scale = trace / n
    return scale if scale > 0 else 1.0


def default_lambda_grid(X, y, spec, size=50, low=1e-4, high=1e4):
    """
    Descending log-spaced grid.

    Lasso uses lambda_max * [low, 1] with lambda_max = max|X'y|/n, the
    lower end raised to 1e-2 * lambda_max when p > n;
    the quadratic penalties use [low, high] * trace(operator)/n.
    """
    X = np.asarray(getattr(X, "values", X), dtype=float)
    y = np.asarray(getattr(y, "values", y), dtype=float)
    if size < 1:
        raise DomainError("Lambda grid needs at least one value")
    if spec.method in UNTUNED_METHODS:
        raise UsageError(f"Method {spec.method.value} is tuned by its component count, not lambda")
    if spec.method is Method.LASSO:
        top = lasso_lambda_max(X, y)
        top = top if top > 0 else 1.0
        if X.shape[1] > X.shape[0]:
            low = max(low, LASSO_WIDE_RATIO)
        return np.geomspace(top, top * low, size) if size > 1 else np.array([top])
    scale = _grid_scale(X, spec)
    return np.geomspace(high * scale, low * scale, size) if size > 1 else np.array([scale])


def _check_grid(lambda_grid):
    grid = np.asarray(lambda_grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise DomainError("Lambda grid must be a nonempty vector")
    if np.any(~np.isfinite(grid)) or np.any(grid <= 0):
        raise DomainError("Lambda grid values must be positive and finite")
    if np.any(np.diff(grid) >= 0):
        raise DomainError("Lambda grid must be strictly descending")
    return grid


def _test_error(residual, weight_sub):
    if weight_sub is None:
        return float(residual @ residual)
    return float(residual @ weight_sub @ residual)


def _fold_errors(spec, X, y, grid, folds, fold, weight):
    """Held-out error at every grid value for one fold"""
    train = np.where(folds != fold)[0]
    test = np.where(folds == fold)[0]
    X_train, y_train, X_test, y_test = X[train], y[train], X[test], y[test]
    weight_sub = None if weight is None else weight[np.ix_(test, test)]
    h_train = None if spec.h_kernel is None else spec.h_kernel[np.ix_(train, train)]

    try:
        if spec.method is Method.LASSO:
            fits = lasso_path(X_train, y_train, grid)
        else:
            fits = [fit_with_spec(spec, X_train, y_train, lambda_, h_kernel=h_train) for lambda_ in grid]
    except KprError as e:
        logger.error(f"Cross-validation failed in fold {fold}: {e}")
        raise e.__class__(f"fold {fold}: {e}") from e

    return np.array([_test_error(y_test - predict_values(fit, X_test), weight_sub) for fit in fits])


def cross_validate(spec, X, y, lambda_grid, k=10, seed=0, weight=None, fold_assignment=None, n_jobs=1):
    """
    K-fold cross-validation of one estimator over a lambda grid.

    Args:
        spec (MethodSpec): Estimator tag and fixed kernels; spec.h_kernel is
            restricted to the training samples of each fold
        X (array-like or AbundanceTable): n x p design
        y (array-like or ResponseVector): Response
        lambda_grid (array-like): Positive, strictly descending
        k (int): Number of folds
        seed (int): Seed of the fold assignment
        weight (array-like or Kernel, optional): n x n H; test errors become
            r'H_test r with H_test the principal submatrix on the held-out samples
        fold_assignment (array-like, optional): Explicit fold index per sample
        n_jobs (int): joblib workers over folds

    Returns:
        CvResult
    """
    X = np.asarray(getattr(X, "values", X), dtype=float)
    y = np.asarray(getattr(y, "values", y), dtype=float)
    grid = _check_grid(lambda_grid)
    if spec.method in UNTUNED_METHODS:
        raise UsageError(f"Method {spec.method.value} is tuned by its component count, not lambda")
    if weight is not None:
        weight = np.asarray(getattr(weight, "values", weight), dtype=float)
        if weight.shape != (len(y), len(y)):
            raise DomainError(f"Weight kernel has shape {weight.shape}, expected ({len(y)}, {len(y)})")

    if fold_assignment is None:
        folds = kfold_split(len(y), k, seed)
    else:
        folds = np.asarray(fold_assignment, dtype=int)
        k = int(folds.max()) + 1
        if folds.shape != (len(y),) or np.any(np.bincount(folds, minlength=k) == 0):
            raise DomainError("Fold assignment must give every fold at least one sample")

    columns = Parallel(n_jobs=n_jobs)(
        delayed(_fold_errors)(spec, X, y, grid, folds, fold, weight) for fold in range(k)
    )
    fold_errors = np.column_stack(columns)

    mean = fold_errors.mean(axis=1)
    se = fold_errors.std(axis=1, ddof=1) / np.sqrt(k)
    # argmin returns the first minimum, i.e. the largest lambda among ties
    best = int(np.argmin(mean))
    within = np.where(mean <= mean[best] + se[best])[0]
    one_se = int(within[0])

    result = CvResult(grid, fold_errors, folds, grid[best], grid[one_se])
    logger.debug(f"CV for {spec.method.value}: lambda_min={result.lambda_min:.4g}, lambda_1se={result.lambda_1se:.4g}")
    return result


def select(cv, rule):
    """Selected lambda under cv_min or cv_1se"""
    if not isinstance(rule, TuningRule):
        rule = TuningRule.parse(rule)
    return cv.selected(rule)
