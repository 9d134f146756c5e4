"""
Service functions for compositional data: closure, zero replacement, the
centered log-ratio transform, the Aitchison variation matrix and the
covariance kernel derived from it.
"""
import logging
import math

import numpy as np
from scipy.special import softmax

from models.tables import Composition, Kernel, KernelProvenance, VariationMatrix
from services.kernel_service import _double_center_values, psd_project
from utils.errors import DomainError

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


def closure(X):
    """Rescale every row of a nonnegative table to unit sum"""
    values = X.values
    if np.any(values < 0):
        raise DomainError("Compositional entries must be nonnegative")
    sums = values.sum(axis=1, keepdims=True)
    empty = np.where(sums[:, 0] <= 0)[0]
    if empty.size:
        raise DomainError(f"Sample '{X.sample_ids[empty[0]]}' has no positive entry")
    return X.with_values(values / sums)


def default_zero_replacement(X):
    """Half the smallest positive proportion in the table"""
    proportions = closure(X).values
    return 0.5 * float(np.min(proportions[proportions > 0]))


def replace_zeros(X, zero_replacement=None):
    """
    Close rows, add zero_replacement in place of zeros, and re-close.

    Args:
        X (AbundanceTable): Nonnegative counts or proportions
        zero_replacement (float, optional): Pseudocount on the proportion
            scale; defaults to half the smallest positive proportion

    Raises:
        DomainError: zero_replacement <= 0 while zeros are present
    """
    closed = closure(X)
    values = np.array(closed.values)
    zeros = values == 0
    if not zeros.any():
        return closed
    if zero_replacement is None:
        zero_replacement = default_zero_replacement(X)
    if zero_replacement <= 0:
        raise DomainError(f"zero_replacement must be positive when zeros are present, got {zero_replacement}")
    logger.info(f"Replacing {int(zeros.sum())} zero(s) with {zero_replacement:.3g}")
    values[zeros] = zero_replacement
    return closed.with_values(values / values.sum(axis=1, keepdims=True))


def clr_transform(X, zero_replacement=None):
    """
    Centered log-ratio transform of each row: log(x_k / g(x)).

    Rows of the output sum to zero.
    """
    positive = replace_zeros(X, zero_replacement)
    logs = np.log(positive.values)
    return X.with_values(logs - logs.mean(axis=1, keepdims=True))


def clr_inverse(Z):
    """Map CLR coordinates back to closed compositions"""
    return Z.with_values(softmax(Z.values, axis=1))


def variation_matrix(X):
    """
    Normalized variation matrix T[k, l] = var(log(x_k / x_l) / sqrt(2)).

    The variance uses denominator n - 1. Computed from the log-scale
    covariance S as T = (s 1' + 1 s')/2 - S, with s = diag(S).

    Raises:
        DomainError: n < 2 or a nonpositive entry (replace zeros first)
    """
    if X.n < 2:
        raise DomainError("Variation matrix needs at least two samples")
    if np.any(X.values <= 0):
        raise DomainError("Variation matrix needs strictly positive entries; replace zeros first")
    S = np.cov(np.log(X.values), rowvar=False, ddof=1)
    S = np.atleast_2d(S)
    s = np.diag(S)
    T = 0.5 * (s[:, None] + s[None, :]) - S
    T = np.clip(0.5 * (T + T.T), 0.0, None)
    np.fill_diagonal(T, 0.0)
    return VariationMatrix(X.taxon_ids, T)


def aitchison_covariance(T):
    """
    Kernel C = -1/2 J T J over taxa, PSD-repaired.

    T carries the 1/sqrt(2) scaling of the log-ratios, so C equals half the
    sample covariance of the CLR rows (denominator n - 1), not the full one.
    """
    C = Kernel(T.ids, _double_center_values(T.values), KernelProvenance.AITCHISON_COV)
    return psd_project(C, provenance=KernelProvenance.AITCHISON_COV)


def aitchison_norm(x):
    """
    Aitchison norm sqrt( (1/2p) sum_{k,l} log(x_k/x_l)^2 ).

    Accepts a Composition or any strictly positive vector.
    """
    values = x.values if isinstance(x, Composition) else np.asarray(x, dtype=float)
    if np.any(values <= 0):
        raise DomainError("Aitchison norm needs strictly positive entries")
    logs = np.log(values)
    ratios = logs[:, None] - logs[None, :]
    return math.sqrt(np.sum(ratios ** 2) / (2 * len(values)))
