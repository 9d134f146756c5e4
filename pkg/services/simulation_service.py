"""
Service functions for the Monte-Carlo comparison of KPR with ridge and
lasso: true-signal construction for the dpcoa, unifrac and edge
protocols, R^2 noise calibration, calibrated kernel perturbation, the
replication loop and the summary table.
"""
import hashlib
import json
import logging
import math

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from models.results import Method, MethodSpec, Scenario, SimulationRecord
from models.tables import Kernel
from services.estimator_service import fit_with_spec, predict_values
from services.tuning_service import cross_validate, default_lambda_grid, select
from utils.errors import CalibrationError, DomainError, KprError, NotPSDError
from utils.linalg_utils import cholesky_factor, sorted_eigh, symmetrize, thin_svd, numerical_rank

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

CALIBRATION_TOL = 1e-3
CALIBRATION_MAX_ITER = 100
SUMMARY_KEYS = ['scenario', 'r2', 'perturbation', 'sparsity', 'method', 'tuning_rule', 'pred_metric']


def _values(obj):
    return np.asarray(getattr(obj, "values", obj), dtype=float)


def _top_two(U, s, what):
    if numerical_rank(s, (U.shape[0], len(s))) < 2:
        raise DomainError(f"{what} has rank below 2; a two-component truth is undefined")
    return U[:, :2], s[:2]


def make_true_dpcoa(X, y_seed, Q, sparsity):
    """
    True DPCoA coefficients and signal.

    With Q = LL' and XL = USV', beta_true hard-thresholds the two-component
    coefficient V2 S2^-1 U2'y so that exactly `sparsity` entries survive
    (the largest in magnitude; ties keep the lower index) and
    y_true = U2 S2 V2' beta_true. beta_true is in XL coordinates.

    Returns:
        (beta_true, y_true)
    """
    X, y = _values(X), _values(y_seed)
    p = X.shape[1]
    sparsity = int(sparsity)
    if sparsity < 0 or sparsity > p:
        raise DomainError(f"Sparsity {sparsity} outside [0, {p}]")
    L, _ = cholesky_factor(_values(Q))
    U, s, V = thin_svd(X @ L)
    U2, s2 = _top_two(U, s, "XL")
    V2 = V[:, :2]
    coefficients = V2 @ ((U2.T @ y) / s2)

    beta_true = np.zeros(p)
    keep = np.argsort(-np.abs(coefficients), kind="stable")[:sparsity]
    beta_true[keep] = coefficients[keep]
    y_true = U2 @ (s2 * (V2.T @ beta_true))
    return beta_true, y_true


def make_true_unifrac(H, y_seed):
    """
    True dual coefficients and signal from the top two eigenpairs of H.

    Writing H = U S^2 U', gamma_true = S2^-1 U2'y and y_true = U2 S2 gamma_true,
    the projection of y onto the leading two eigenvectors.

    Returns:
        (gamma_true, y_true)
    """
    y = _values(y_seed)
    values, vectors = sorted_eigh(_values(H))
    top = max(values[0], 0.0)
    positive = int(np.sum(values > top * len(values) * np.finfo(float).eps)) if top > 0 else 0
    if positive < 2:
        raise DomainError(f"H has {positive} positive eigenvalues; at least 2 are required")
    U2, s2 = vectors[:, :2], np.sqrt(values[:2])
    gamma_true = (U2.T @ y) / s2
    return gamma_true, U2 @ (s2 * gamma_true)


def make_true_edge(X, y_seed):
    """
    True coefficients for the edge protocol from the SVD of X alone.

    y_true is the projection of y onto the top two left singular vectors and
    beta_true = V2 S2^-1 U2' y_true.

    Returns:
        (beta_true, y_true)
    """
    X, y = _values(X), _values(y_seed)
    U, s, V = thin_svd(X)
    U2, s2 = _top_two(U, s, "X")
    y_true = U2 @ (U2.T @ y)
    return V[:, :2] @ ((U2.T @ y_true) / s2), y_true


def noise_for_r2(var_y_true, r2):
    """sigma^2 with var / (var + sigma^2) = r2"""
    var_y_true, r2 = float(var_y_true), float(r2)
    if not 0 < r2 < 1:
        raise DomainError(f"R^2 must lie in (0, 1), got {r2}")
    if not var_y_true > 0:
        raise DomainError(f"Variance of the true signal must be positive, got {var_y_true}")
    return var_y_true * (1.0 - r2) / r2


def perturb_kernel(M, target_ratio, seed):
    """
    Noisy copy of a kernel with the same spectrum.

    A symmetric standard Gaussian matrix G is drawn once; the scale c of
    M + cG is found by bracket doubling and bisection so that, after the
    eigenvalues of M + cG are replaced by those of M (both sorted), the
    Frobenius ratio ||M - M_obs|| / ||M|| is within 1e-3 of the target.

    Args:
        M (Kernel or array-like): PSD matrix
        target_ratio (float): Target ratio >= 0; 0 returns M unchanged
        seed (int or numpy.random.Generator): Noise source

    Raises:
        CalibrationError: Target not bracketed or not reached in 100 iterations
    """
    target = float(target_ratio)
    if target < 0:
        raise DomainError(f"Perturbation level must be nonnegative, got {target}")
    if target == 0:
        return M

    values = _values(M)
    norm = np.linalg.norm(values)
    if norm == 0:
        raise DomainError("Cannot perturb a zero kernel")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    spectrum, _ = sorted_eigh(values)
    noise = rng.standard_normal(values.shape)
    noise = np.triu(noise) + np.triu(noise, 1).T

    def perturbed(scale):
        _, vectors = sorted_eigh(values + scale * noise)
        return symmetrize((vectors * spectrum) @ vectors.T)

    def ratio(scale):
        return float(np.linalg.norm(values - perturbed(scale)) / norm)

    low, high = 0.0, target * norm / np.linalg.norm(noise)
    iterations = 0
    while ratio(high) < target:
        low, high = high, 2.0 * high
        iterations += 1
        if iterations >= CALIBRATION_MAX_ITER:
            logger.error(f"Could not bracket perturbation target {target}")
            raise CalibrationError(f"Could not bracket perturbation target {target} in {CALIBRATION_MAX_ITER} doublings")

    for _ in range(CALIBRATION_MAX_ITER):
        middle = 0.5 * (low + high)
        achieved = ratio(middle)
        if abs(achieved - target) <= CALIBRATION_TOL:
            result = perturbed(middle)
            if isinstance(M, Kernel):
                return Kernel(M.ids, result, M.provenance)
            return result
        if achieved < target:
            low = middle
        else:
            high = middle

    logger.error(f"Perturbation calibration did not reach {target} (last {achieved:.4f})")
    raise CalibrationError(f"Perturbation calibration did not reach {target} within {CALIBRATION_MAX_ITER} iterations")


def replication_seed(seed, scenario, r2, perturbation, sparsity, replication):
    """Stable 64-bit seed for one grid cell and replication"""
    key = json.dumps([int(seed), str(scenario), float(r2), float(perturbation), sparsity, int(replication)])
    return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")


def _sparsity_counts(levels, p):
    """Nonzero counts floor(level * p), each at least 1"""
    counts = set()
    for level in levels:
        count = int(math.floor(level * p))
        if count < 1:
            raise DomainError(f"Sparsity level {level} keeps no taxa at p={p}")
        counts.add(count)
    return sorted(counts)


def _truths(config, bundle):
    """
    (sparsity count or None, beta_true or None, y_true) per truth the scenario needs.

    beta_true is always on the taxon scale of X; the dpcoa truth is mapped
    back from XL coordinates.
    """
    X, y_seed = bundle.X.values, bundle.y_seed.values
    if config.scenario is Scenario.DPCOA:
        if bundle.q_kernel is None:
            raise DomainError("The dpcoa scenario needs a taxon kernel Q")
        counts = _sparsity_counts(config.sparsity_levels, bundle.X.p)
        L, _ = cholesky_factor(bundle.q_kernel.values)
        truths = []
        for count in counts:
            beta_true, y_true = make_true_dpcoa(X, y_seed, bundle.q_kernel.values, count)
            truths.append((count, L @ beta_true, y_true))
        return truths
    if bundle.h_kernel is None:
        raise DomainError(f"The {config.scenario.value} scenario needs a sample kernel H")
    if config.scenario is Scenario.UNIFRAC:
        _, y_true = make_true_unifrac(bundle.h_kernel.values, y_seed)
        return [(None, None, y_true)]
    return [(None, *make_true_edge(X, y_seed))]


def _competitors(config, kernel_obs, p):
    """Method label and spec for KPR, ridge and lasso"""
    if config.scenario is Scenario.DPCOA:
        kpr = MethodSpec(Method.DPCOA, q_kernel=kernel_obs)
    else:
        kpr = MethodSpec(Method.KPR2, q_kernel=np.eye(p), h_kernel=kernel_obs)
    return [("kpr", kpr), ("ridge", MethodSpec(Method.RIDGE)), ("lasso", MethodSpec(Method.LASSO))]


def _run_replication(config, X, kernel, truth, r2, perturbation, replication):
    """Records of every method under every tuning rule for one replication"""
    sparsity, beta_true, y_true = truth
    scenario = config.scenario
    rng = np.random.default_rng(replication_seed(config.seed, scenario.value, r2, perturbation, sparsity, replication))
    coordinates = f"scenario={scenario.value} r2={r2} perturbation={perturbation} sparsity={sparsity} replication={replication}"

    try:
        kernel_obs = perturb_kernel(kernel, perturbation, rng)
        if scenario is Scenario.DPCOA:
            # one factorization-ready copy shared by every CV fit
            _, kernel_obs = cholesky_factor(kernel_obs)
        sigma2 = 0.0 if config.noise_free else noise_for_r2(np.var(y_true, ddof=1), r2)
        y_obs = y_true + math.sqrt(sigma2) * rng.standard_normal(len(y_true))
        fold_seed = int(rng.integers(2 ** 32))

        weighted = scenario is not Scenario.DPCOA
        weight = kernel_obs if weighted else None
        metric = "hpsse" if weighted else "psse"

        records = []
        for label, spec in _competitors(config, kernel_obs, X.shape[1]):
            grid = default_lambda_grid(X, y_obs, spec, config.lambda_grid_size, config.lambda_low, config.lambda_high)
            cv = cross_validate(spec, X, y_obs, grid, k=config.folds, seed=fold_seed, weight=weight)
            for rule in config.tuning_rules:
                lambda_ = select(cv, rule)
                fit = fit_with_spec(spec, X, y_obs, lambda_)
                residual = predict_values(fit, X) - y_true
                pred_sse = residual @ kernel @ residual if weighted else residual @ residual
                esse = None if beta_true is None else float(np.sum((fit.effective_beta() - beta_true) ** 2))
                records.append(SimulationRecord(
                    scenario, replication, r2, perturbation, sparsity, label, rule,
                    esse, max(float(pred_sse), 0.0), metric, lambda_,
                ))
        return records
    except KprError as e:
        logger.error(f"Replication failed at {coordinates}: {e}")
        raise e.__class__(f"{coordinates}: {e}") from e


def run_scenario(config, bundle):
    """
    Run every (r2, perturbation, sparsity, replication) cell of a study.

    Each replication draws its kernel perturbation, noise and fold
    assignment from its own seed, so the record list does not depend on
    n_jobs or on execution order. Records are sorted by coordinates.

    Args:
        config (ScenarioConfig): Study description
        bundle (DataBundle): Design, seed response and the scenario's kernel

    Returns:
        list of SimulationRecord
    """
    X = bundle.X.values
    truths = _truths(config, bundle)
    kernel = bundle.q_kernel.values if config.scenario is Scenario.DPCOA else bundle.h_kernel.values
    if not np.all(np.linalg.eigvalsh(kernel) >= -1e-8 * max(np.abs(kernel).max(), 1.0)):
        raise NotPSDError(f"The {config.scenario.value} kernel is not positive semi-definite")

    tasks = [
        (truth, r2, perturbation, replication)
        for truth in truths
        for r2 in config.r2_grid
        for perturbation in config.perturbation_levels
        for replication in range(config.replications)
    ]
    logger.info(f"Running {config.scenario.value} scenario: {len(tasks)} replications on n={X.shape[0]}, p={X.shape[1]}")

    batches = Parallel(n_jobs=config.n_jobs)(
        delayed(_run_replication)(config, X, kernel, truth, r2, perturbation, replication)
        for truth, r2, perturbation, replication in tasks
    )
    records = [record for batch in batches for record in batch]
    records.sort(key=lambda record: record.coordinates())
    return records


def summarize(records):
    """
    Mean, standard error and 95% band of each metric per grid cell, method and rule.

    Returns:
        pandas.DataFrame with one row per (scenario, r2, perturbation,
        sparsity, method, tuning_rule, pred_metric)
    """
    frame = pd.DataFrame([record.to_dict() for record in records], columns=list(SimulationRecord.FIELDS))
    if frame.empty:
        raise DomainError("No records to summarize")
    frame['esse'] = frame['esse'].astype(float)
    grouped = frame.groupby(SUMMARY_KEYS, dropna=False, sort=True)

    summary = grouped.agg(
        replications=('pred_sse', 'size'),
        esse_mean=('esse', 'mean'),
        esse_se=('esse', 'sem'),
        pred_mean=('pred_sse', 'mean'),
        pred_se=('pred_sse', 'sem'),
    ).reset_index()
    for metric in ('esse', 'pred'):
        summary[f'{metric}_lower'] = summary[f'{metric}_mean'] - 1.96 * summary[f'{metric}_se']
        summary[f'{metric}_upper'] = summary[f'{metric}_mean'] + 1.96 * summary[f'{metric}_se']
    return summary
