"""
Estimator, tuning and simulation result types
"""
import math
from enum import Enum

import numpy as np

from utils.errors import DomainError, UsageError


class Method(Enum):
    """Estimator tags"""
    PCR = "pcr"
    RIDGE = "ridge"
    GRIDGE = "gridge"
    DPCR = "dpcr"
    DPCOA = "dpcoa"
    FRANKLIN = "franklin"
    KPR2 = "kpr2"
    LASSO = "lasso"
    COMP_KPR = "comp_kpr"

    @classmethod
    def parse(cls, text):
        """Accept both 'comp_kpr' and the CLI spelling 'comp-kpr'"""
        try:
            return cls(str(text).replace("-", "_").lower())
        except ValueError as e:
            choices = ", ".join(m.value for m in cls)
            raise UsageError(f"Unknown method '{text}' (choose from {choices})") from e


class TuningRule(Enum):
    """Cross-validation selection rules"""
    CV_MIN = "cv_min"
    CV_1SE = "cv_1se"

    @classmethod
    def parse(cls, text):
        aliases = {"min": cls.CV_MIN, "1se": cls.CV_1SE}
        text = str(text).lower()
        if text in aliases:
            return aliases[text]
        try:
            return cls(text)
        except ValueError as e:
            raise UsageError(f"Unknown tuning rule '{text}' (choose min or 1se)") from e


class Scenario(Enum):
    """Monte-Carlo protocols"""
    DPCOA = "dpcoa"
    UNIFRAC = "unifrac"
    EDGE = "edge"


class FitResult:
    """
    Output of one penalized fit.

    Args:
        beta (array-like): p primal coefficients
        lambda_ (float): Tuning parameter (0 for truncation methods)
        method (Method): Estimator that produced the fit
        gamma (array-like, optional): n dual coefficients
        loading (array-like, optional): p x p Cholesky factor L for fits whose
            beta lives in XL coordinates (dpcr, dpcoa)
        components (int, optional): Truncation level for pcr/dpcr
    """
    def __init__(self, beta, lambda_, method, gamma=None, loading=None, components=None):
        self.beta = np.array(beta, dtype=float)
        if self.beta.ndim != 1 or not np.all(np.isfinite(self.beta)):
            raise DomainError("beta must be a finite vector")
        self.lambda_ = float(lambda_)
        self.method = Method(method)
        self.gamma = None if gamma is None else np.array(gamma, dtype=float)
        self.loading = None if loading is None else np.array(loading, dtype=float)
        self.components = components

    @property
    def p(self):
        return len(self.beta)

    def effective_beta(self):
        """Coefficients on the original taxon scale: L beta when a loading is carried"""
        if self.loading is None:
            return self.beta
        return self.loading @ self.beta

    def to_dict(self, taxon_ids=None, sample_ids=None):
        """Structured record; coefficients keyed by id when ids are given"""
        def keyed(values, ids):
            if values is None:
                return None
            if ids is None:
                return values.tolist()
            return dict(zip(ids, values.tolist()))

        return {
            'method': self.method.value,
            'lambda': self.lambda_,
            'components': self.components,
            'beta': keyed(self.beta, taxon_ids),
            'gamma': keyed(self.gamma, sample_ids),
            'has_loading': self.loading is not None,
        }


class CvResult:
    """
    K-fold cross-validation over a descending lambda grid.

    Args:
        lambda_grid (array-like): Positive, descending
        fold_errors (array-like): len(grid) x k held-out errors
        fold_assignment (array-like): Fold index per sample
        lambda_min (float): Grid value with smallest mean error
        lambda_1se (float): Largest grid value within one se of the minimum
    """
    def __init__(self, lambda_grid, fold_errors, fold_assignment, lambda_min, lambda_1se):
        self.lambda_grid = np.array(lambda_grid, dtype=float)
        self.fold_errors = np.array(fold_errors, dtype=float)
        self.fold_assignment = np.array(fold_assignment, dtype=int)
        self.lambda_min = float(lambda_min)
        self.lambda_1se = float(lambda_1se)
        k = self.fold_errors.shape[1]
        self.mean_error = self.fold_errors.mean(axis=1)
        ddof = 1 if k > 1 else 0
        self.se_error = self.fold_errors.std(axis=1, ddof=ddof) / math.sqrt(k)
        if not np.all(np.isfinite(self.fold_errors)):
            raise DomainError("Cross-validation errors must be finite")

    @property
    def folds(self):
        return self.fold_errors.shape[1]

    def selected(self, rule):
        rule = TuningRule(rule)
        return self.lambda_min if rule is TuningRule.CV_MIN else self.lambda_1se

    def to_dict(self, sample_ids=None):
        assignment = self.fold_assignment.tolist()
        if sample_ids is not None:
            assignment = dict(zip(sample_ids, assignment))
        return {
            'lambda_grid': self.lambda_grid.tolist(),
            'mean_error': self.mean_error.tolist(),
            'se_error': self.se_error.tolist(),
            'lambda_min': self.lambda_min,
            'lambda_1se': self.lambda_1se,
            'fold_assignment': assignment,
        }


class MethodSpec:
    """
    An estimator tag together with its fixed kernels.

    Args:
        method (Method): Estimator tag
        q_kernel (array-like, optional): p x p taxon kernel (gridge, dpcr, dpcoa, kpr2)
        h_kernel (array-like, optional): n x n sample kernel (franklin, kpr2); restricted to
            training samples inside cross-validation
        components (int, optional): Truncation level (pcr, dpcr)
    """
    def __init__(self, method, q_kernel=None, h_kernel=None, components=None):
        self.method = Method(method)
        self.q_kernel = None if q_kernel is None else np.asarray(q_kernel, dtype=float)
        self.h_kernel = None if h_kernel is None else np.asarray(h_kernel, dtype=float)
        self.components = components
        needs_q = {Method.GRIDGE, Method.DPCR, Method.DPCOA}
        needs_h = {Method.FRANKLIN, Method.KPR2}
        if self.method in needs_q and self.q_kernel is None:
            raise UsageError(f"Method {self.method.value} requires a taxon kernel Q")
        if self.method in needs_h and self.h_kernel is None:
            raise UsageError(f"Method {self.method.value} requires a sample kernel H")
        if self.method in {Method.PCR, Method.DPCR} and not components:
            raise UsageError(f"Method {self.method.value} requires a component count")


class ScenarioConfig:
    """
    One Monte-Carlo study.

    Args:
        scenario (Scenario): dpcoa, unifrac or edge
        r2_grid (sequence of float): Target R^2 values in (0, 1)
        perturbation_levels (sequence of float): Frobenius ratios ||M - M_obs||/||M|| >= 0
        sparsity_levels (sequence of float): Fractions of p kept nonzero (dpcoa only)
        replications (int): Replications per grid cell
        seed (int): Root seed
        tuning_rules (sequence of TuningRule): Rules to report, each method under each rule
        folds (int): Cross-validation folds
        lambda_grid_size, lambda_low, lambda_high: Default grid shape
        noise_free (bool): Force epsilon = 0 (used by tests)
        n_jobs (int): joblib workers for replications
    """
    def __init__(self, scenario, r2_grid=(0.2, 0.5, 0.8), perturbation_levels=(0.0,),
                 sparsity_levels=(1.0,), replications=1, seed=0, tuning_rules=(TuningRule.CV_1SE,),
                 folds=10, lambda_grid_size=50, lambda_low=1e-4, lambda_high=1e4,
                 noise_free=False, n_jobs=1):
        self.scenario = Scenario(scenario)
        self.r2_grid = [float(r) for r in r2_grid]
        self.perturbation_levels = [float(v) for v in perturbation_levels]
        self.sparsity_levels = [float(v) for v in sparsity_levels]
        self.replications = int(replications)
        self.seed = int(seed)
        self.tuning_rules = [TuningRule.parse(r) if not isinstance(r, TuningRule) else r for r in tuning_rules]
        self.folds = int(folds)
        self.lambda_grid_size = int(lambda_grid_size)
        self.lambda_low = float(lambda_low)
        self.lambda_high = float(lambda_high)
        self.noise_free = bool(noise_free)
        self.n_jobs = int(n_jobs)

        if not self.r2_grid or any(not 0 < r < 1 for r in self.r2_grid):
            raise DomainError(f"R^2 values must lie in (0, 1), got {self.r2_grid}")
        if any(v < 0 for v in self.perturbation_levels):
            raise DomainError("Perturbation levels must be nonnegative")
        if any(not 0 < v <= 1 for v in self.sparsity_levels):
            raise DomainError(f"Sparsity levels are fractions of p in (0, 1], got {self.sparsity_levels}")
        if self.replications < 1:
            raise DomainError("At least one replication is required")
        if not self.tuning_rules:
            raise DomainError("At least one tuning rule is required")
        if self.folds < 2:
            raise DomainError("Cross-validation needs at least 2 folds")

    def to_dict(self):
        return {
            'scenario': self.scenario.value,
            'r2_grid': self.r2_grid,
            'perturbation_levels': self.perturbation_levels,
            'sparsity_levels': self.sparsity_levels,
            'replications': self.replications,
            'seed': self.seed,
            'tuning_rules': [r.value for r in self.tuning_rules],
            'folds': self.folds,
            'lambda_grid_size': self.lambda_grid_size,
            'lambda_low': self.lambda_low,
            'lambda_high': self.lambda_high,
            'noise_free': self.noise_free,
        }


class SimulationRecord:
    """
    Metrics of one method in one Monte-Carlo replication.

    `pred_sse` is PSSE for the dpcoa scenario and the H-weighted HPSSE for
    unifrac and edge; `pred_metric` names which. `esse` is None for unifrac.
    """
    FIELDS = ('scenario', 'replication', 'r2', 'perturbation', 'sparsity', 'method',
              'tuning_rule', 'esse', 'pred_sse', 'pred_metric', 'lambda_selected')

    def __init__(self, scenario, replication, r2, perturbation, sparsity, method, tuning_rule,
                 esse, pred_sse, pred_metric, lambda_selected):
        self.scenario = Scenario(scenario).value
        self.replication = int(replication)
        self.r2 = float(r2)
        self.perturbation = float(perturbation)
        self.sparsity = None if sparsity is None else int(sparsity)
        self.method = str(method)
        self.tuning_rule = TuningRule(tuning_rule).value
        self.esse = None if esse is None else float(esse)
        self.pred_sse = float(pred_sse)
        self.pred_metric = str(pred_metric)
        self.lambda_selected = float(lambda_selected)
        for name in ('esse', 'pred_sse'):
            value = getattr(self, name)
            if value is not None and (not math.isfinite(value) or value < 0):
                raise DomainError(f"{name} must be finite and nonnegative, got {value!r}")

    def coordinates(self):
        """Sort key: grid cell, replication, then method and rule"""
        return (self.scenario, self.r2, self.perturbation, -1 if self.sparsity is None else self.sparsity,
                self.replication, self.method, self.tuning_rule)

    def to_dict(self):
        return {name: getattr(self, name) for name in self.FIELDS}

    @classmethod
    def from_dict(cls, data):
        return cls(**{name: data.get(name) for name in cls.FIELDS})

    def __eq__(self, other):
        return isinstance(other, SimulationRecord) and self.to_dict() == other.to_dict()

    def __repr__(self):
        return f"SimulationRecord({self.to_dict()!r})"
