"""
Service functions for building, validating and transforming similarity
kernels: Gower double-centering, Gram kernels XQX', PSD repair, PCoA
coordinates and the empirical HSIC.
"""
import logging

import numpy as np
from scipy import linalg

from models.tables import Kernel, KernelProvenance, SquareMatrix
from utils.config_utils import PSD_TOL
from utils.errors import DomainError, NotPSDError, SchemaError
from utils.linalg_utils import sorted_eigh, symmetrize

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


def _double_center_values(D):
    """-1/2 J D J computed from row, column and grand means"""
    D = np.asarray(D, dtype=float)
    row = D.mean(axis=1, keepdims=True)
    col = D.mean(axis=0, keepdims=True)
    return symmetrize(-0.5 * (D - row - col + D.mean()))


def double_center(D, provenance=KernelProvenance.DOUBLE_CENTERED):
    """
    Convert a matrix of squared dissimilarities into a similarity kernel.

    Args:
        D (SquareMatrix): Squared dissimilarities, zero diagonal, nonnegative

    Returns:
        Kernel: -1/2 J D J, whose rows and columns sum to zero
    """
    values = D.values
    scale = max(np.max(np.abs(values)), 1.0)
    if np.any(np.abs(np.diag(values)) > 1e-12 * scale):
        raise DomainError("Dissimilarity matrix must have a zero diagonal")
    if np.any(values < -1e-12 * scale):
        raise DomainError("Dissimilarities must be nonnegative")
    return Kernel(D.ids, _double_center_values(values), provenance)


def squared_euclidean_distances(X):
    """Pairwise squared Euclidean distances between the rows of an AbundanceTable"""
    values = X.values
    norms = np.sum(values ** 2, axis=1)
    D = norms[:, None] + norms[None, :] - 2.0 * values @ values.T
    D = np.clip(symmetrize(D), 0.0, None)
    np.fill_diagonal(D, 0.0)
    return SquareMatrix(X.sample_ids, D)


def linear_kernel(X):
    """K_I = XX' for a column-centered table"""
    return Kernel(X.sample_ids, symmetrize(X.values @ X.values.T), KernelProvenance.EUCLIDEAN)


def gram_kernel(X, Q):
    """
    DPCoA kernel K_Q = XQX'.

    Args:
        X (AbundanceTable): Column-centered sample-by-taxon table
        Q (Kernel): p x p taxon kernel with ids equal to X's taxon ids
    """
    Q.check_aligned(X.taxon_ids, "taxon kernel Q")
    values = X.values @ Q.values @ X.values.T
    return Kernel(X.sample_ids, symmetrize(values), KernelProvenance.GRAM_Q)


def edge_kernel(E):
    """H = E_c E_c' from the column-centered edge mass difference matrix"""
    centered = E.values - E.values.mean(axis=0, keepdims=True)
    return Kernel(E.sample_ids, symmetrize(centered @ centered.T), KernelProvenance.EDGE)


def ridge_augment(Q, c):
    """Q + cI: adds a ridge component to a structured taxon kernel"""
    return Kernel(Q.ids, Q.values + float(c) * np.eye(Q.size), Q.provenance)


def psd_project(M, tol=PSD_TOL, provenance=None):
    """
    Repair rounding-level indefiniteness.

    Eigenvalues in [-tol * lambda_max, 0) are clipped to zero and the matrix
    is rebuilt; anything more negative is rejected.

    Raises:
        NotPSDError: An eigenvalue lies below -tol * lambda_max
    """
    if provenance is None:
        provenance = getattr(M, "provenance", KernelProvenance.CUSTOM)
    values, vectors = linalg.eigh(symmetrize(M.values))
    top = max(values[-1], 0.0)
    floor = -tol * top
    if values[0] < floor or (top == 0.0 and values[0] < 0.0):
        logger.error(f"Matrix has eigenvalue {values[0]:.3e} below tolerance {floor:.3e}")
        raise NotPSDError(f"Matrix is not positive semi-definite: eigenvalue {values[0]:.6g} < {floor:.6g}")
    if values[0] >= 0.0:
        return Kernel(M.ids, M.values, provenance)
    clipped = int(np.sum(values < 0))
    logger.warning(f"Clipped {clipped} slightly negative eigenvalue(s) (min {values[0]:.3e})")
    repaired = (vectors * np.clip(values, 0.0, None)) @ vectors.T
    return Kernel(M.ids, symmetrize(repaired), provenance)


def pcoa_coordinates(K, k):
    """
    Principal coordinates: columns sigma_j * u_j for the top-k eigenpairs.

    Eigenvectors are signed so their largest-magnitude entry is positive
    (ties to the lowest index).

    Raises:
        DomainError: k exceeds the number of positive eigenvalues
    """
    k = int(k)
    values, vectors = sorted_eigh(K.values)
    top = max(values[0], 0.0) if values.size else 0.0
    positive = int(np.sum(values > top * K.size * np.finfo(float).eps)) if top > 0 else 0
    if k < 1 or k > positive:
        raise DomainError(f"Requested {k} coordinates but the kernel has {positive} positive eigenvalues")
    return vectors[:, :k] * np.sqrt(values[:k])


def hsic(H, K):
    """Empirical Hilbert-Schmidt independence criterion trace(HK)"""
    if H.size != K.size:
        raise SchemaError(f"Kernels have different sizes ({H.size} vs {K.size})")
    K.check_aligned(H.ids, "second kernel")
    # trace(HK) = sum_ij H_ij K_ji
    return float(np.sum(H.values * K.values.T))


def frobenius_ratio(A, B):
    """||A - B||_F / ||A||_F"""
    A = np.asarray(getattr(A, "values", A), dtype=float)
    B = np.asarray(getattr(B, "values", B), dtype=float)
    norm = np.linalg.norm(A)
    if norm == 0:
        raise DomainError("Reference matrix has zero Frobenius norm")
    return float(np.linalg.norm(A - B) / norm)
