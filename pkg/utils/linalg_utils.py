"""
Shared linear-algebra helpers: symmetric eigendecompositions with a fixed
sign convention, Cholesky factors with jitter, and symmetric solves.
"""
import logging

import numpy as np
from scipy import linalg

from utils.config_utils import JITTER, PSD_TOL
from utils.errors import NotPSDError, SingularKernelError, SingularSystemError

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


def is_symmetric(M, rtol=1e-10):
    """True when M equals its transpose to rtol relative to its largest entry"""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        return False
    scale = max(np.max(np.abs(M)), 1.0) if M.size else 1.0
    return bool(np.max(np.abs(M - M.T), initial=0.0) <= rtol * scale)


def symmetrize(M):
    return 0.5 * (M + M.T)


def fix_signs(vectors):
    """
    Flip each column so its entry of largest magnitude is positive.

    Ties in magnitude go to the lowest row index (np.argmax returns the
    first maximum).
    """
    vectors = np.array(vectors, dtype=float, copy=True)
    if vectors.size == 0:
        return vectors
    pivots = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivots, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def sorted_eigh(M):
    """Eigenpairs of a symmetric matrix, eigenvalues descending, signs fixed"""
    values, vectors = linalg.eigh(symmetrize(np.asarray(M, dtype=float)))
    order = np.argsort(values)[::-1]
    return values[order], fix_signs(vectors[:, order])


def numerical_rank(singular_values, shape):
    """Count of singular values above the LAPACK-style rank tolerance"""
    s = np.asarray(singular_values, dtype=float)
    if s.size == 0 or s[0] <= 0:
        return 0
    tol = s[0] * max(shape) * np.finfo(float).eps
    return int(np.sum(s > tol))


def thin_svd(X):
    """Thin SVD with singular vectors sign-fixed on U (V follows)"""
    U, s, Vt = linalg.svd(np.asarray(X, dtype=float), full_matrices=False)
    fixed = fix_signs(U)
    flips = np.sign(np.sum(fixed * U, axis=0))
    flips[flips == 0] = 1.0
    return fixed, s, Vt.T * flips


def add_jitter(M, eps=JITTER):
    """M + eps * (trace(M)/m) * I"""
    M = np.asarray(M, dtype=float)
    m = M.shape[0]
    level = np.trace(M) / m if m else 0.0
    if level <= 0:
        level = 1.0
    return M + eps * level * np.eye(m)


def cholesky_factor(M, eps=JITTER):
    """
    Lower Cholesky factor L with M = LL'.

    A matrix that is only positive semi-definite (e.g. a double-centered
    kernel, which annihilates the constant vector) is retried once with
    jitter. Returns (L, M_used) so callers can keep LL' consistent.
    """
    M = symmetrize(np.asarray(M, dtype=float))
    try:
        return linalg.cholesky(M, lower=True), M
    except linalg.LinAlgError:
        pass

    jittered = add_jitter(M, eps)
    try:
        L = linalg.cholesky(jittered, lower=True)
    except linalg.LinAlgError as e:
        logger.error(f"Kernel is not positive definite after jitter eps={eps}")
        raise SingularKernelError(f"Kernel is not positive definite after jitter eps={eps}") from e
    logger.warning(f"Added jitter eps={eps} to a singular {M.shape[0]}x{M.shape[0]} kernel before factorization")
    return L, jittered


def psd_root(M, tol=PSD_TOL):
    """
    A factor R with M = RR' for a symmetric positive semi-definite M.

    Rounding-level negative eigenvalues (above -tol * lambda_max) are clipped.

    Raises:
        NotPSDError: An eigenvalue lies below -tol * lambda_max
    """
    values, vectors = linalg.eigh(symmetrize(np.asarray(M, dtype=float)))
    floor = -tol * max(values[-1], 0.0) if values.size else 0.0
    if values.size and (values[0] < floor or (floor == 0.0 and values[0] < 0.0)):
        logger.error(f"Kernel has eigenvalue {values[0]:.3e} below tolerance {floor:.3e}")
        raise NotPSDError(f"Kernel is not positive semi-definite: eigenvalue {values[0]:.6g} < {floor:.6g}")
    return vectors * np.sqrt(np.clip(values, 0.0, None))


def spd_solve(A, b):
    """Solve A x = b for symmetric positive definite A via Cholesky"""
    try:
        factor = linalg.cho_factor(symmetrize(np.asarray(A, dtype=float)), lower=True)
    except linalg.LinAlgError as e:
        logger.error(f"Symmetric system of size {np.shape(A)[0]} is numerically singular")
        raise SingularSystemError(f"Symmetric system of size {np.shape(A)[0]} is numerically singular") from e
    return linalg.cho_solve(factor, b)


def general_solve(A, b):
    """Solve a square (possibly non-symmetric) system A x = b"""
    try:
        return linalg.solve(np.asarray(A, dtype=float), b)
    except (linalg.LinAlgError, ValueError) as e:
        logger.error(f"System of size {np.shape(A)[0]} is numerically singular: {e}")
        raise SingularSystemError(f"System of size {np.shape(A)[0]} is numerically singular: {e}") from e
