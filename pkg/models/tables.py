"""
Matrix-shaped domain types: sample-by-taxon tables, responses, square
dissimilarity and kernel matrices, edge matrices and compositions.

All objects copy their input and freeze the underlying array, so they are
safe to share across threads and worker processes.
"""
from enum import Enum

import numpy as np

from utils.errors import DomainError, SchemaError
from utils.linalg_utils import is_symmetric


class KernelProvenance(Enum):
    """Where a kernel came from"""
    EUCLIDEAN = "euclidean"
    GRAM_Q = "gram_Q"
    DOUBLE_CENTERED = "double_centered"
    AITCHISON_COV = "aitchison_cov"
    EDGE = "edge"
    CUSTOM = "custom"


def _frozen(values, ndim):
    array = np.array(values, dtype=float, copy=True)
    if array.ndim != ndim:
        raise DomainError(f"Expected a {ndim}-dimensional array, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise DomainError("All entries must be finite")
    array.setflags(write=False)
    return array


def _check_ids(ids, what):
    ids = [str(i) for i in ids]
    seen = set()
    for i in ids:
        if i in seen:
            raise SchemaError(f"Duplicate {what} id '{i}'")
        seen.add(i)
    return tuple(ids)


class AbundanceTable:
    """
    Sample-by-taxon matrix X with its identifiers.

    Args:
        sample_ids (sequence of str): Row identifiers, in order
        taxon_ids (sequence of str): Column identifiers, in order
        values (array-like): n x p matrix of counts, proportions or CLR units
    """
    def __init__(self, sample_ids, taxon_ids, values):
        self.sample_ids = _check_ids(sample_ids, "sample")
        self.taxon_ids = _check_ids(taxon_ids, "taxon")
        self.values = _frozen(values, 2)
        if self.values.shape != (len(self.sample_ids), len(self.taxon_ids)):
            raise SchemaError(
                f"Table shape {self.values.shape} does not match "
                f"{len(self.sample_ids)} samples x {len(self.taxon_ids)} taxa"
            )
        if self.n < 2 or self.p < 1:
            raise DomainError(f"Table needs n >= 2 and p >= 1, got n={self.n}, p={self.p}")

    @property
    def n(self):
        return len(self.sample_ids)

    @property
    def p(self):
        return len(self.taxon_ids)

    def with_values(self, values):
        """Same identifiers, new entries"""
        return AbundanceTable(self.sample_ids, self.taxon_ids, values)

    def subset_taxa(self, taxon_ids):
        """Columns reordered/restricted to taxon_ids"""
        position = {t: k for k, t in enumerate(self.taxon_ids)}
        missing = [t for t in taxon_ids if t not in position]
        if missing:
            raise SchemaError(f"Taxa not in table: {', '.join(missing)}")
        cols = [position[t] for t in taxon_ids]
        return AbundanceTable(self.sample_ids, taxon_ids, self.values[:, cols])

    def to_dict(self):
        return {
            'sample_ids': list(self.sample_ids),
            'taxon_ids': list(self.taxon_ids),
            'values': self.values.tolist(),
        }


class ResponseVector:
    """
    Real-valued trait y, one value per sample.

    Args:
        sample_ids (sequence of str): Sample identifiers, in order
        values (array-like): n real numbers
    """
    def __init__(self, sample_ids, values):
        self.sample_ids = _check_ids(sample_ids, "sample")
        self.values = _frozen(values, 1)
        if len(self.values) != len(self.sample_ids):
            raise SchemaError(f"{len(self.values)} values for {len(self.sample_ids)} sample ids")

    @property
    def n(self):
        return len(self.sample_ids)

    def to_dict(self):
        return dict(zip(self.sample_ids, self.values.tolist()))


class SquareMatrix:
    """
    Symmetric m x m matrix indexed by one list of identifiers.

    Houses squared dissimilarity matrices (Delta, delta) as well as the
    base of Kernel and VariationMatrix.
    """
    def __init__(self, ids, values):
        self.ids = _check_ids(ids, "row")
        self.values = _frozen(values, 2)
        m = len(self.ids)
        if self.values.shape != (m, m):
            raise SchemaError(f"Matrix shape {self.values.shape} does not match {m} ids")
        if not is_symmetric(self.values):
            raise DomainError("Matrix is not symmetric to 1e-10 relative")

    @property
    def size(self):
        return len(self.ids)

    def check_aligned(self, other_ids, what="matrix"):
        """Raise SchemaError unless other_ids equals this matrix's ids in order"""
        other_ids = tuple(str(i) for i in other_ids)
        if other_ids != self.ids:
            raise SchemaError(f"Identifiers of {what} do not match ({len(self.ids)} vs {len(other_ids)} ids)")

    def submatrix(self, index):
        """Principal submatrix on positional index"""
        index = np.asarray(index)
        return self.__class__._rebuild(self, [self.ids[i] for i in index], self.values[np.ix_(index, index)])

    @staticmethod
    def _rebuild(template, ids, values):
        return SquareMatrix(ids, values)

    def to_dict(self):
        return {'ids': list(self.ids), 'values': self.values.tolist()}


class Kernel(SquareMatrix):
    """
    Symmetric positive semi-definite similarity matrix (K, H, Q or C).

    Args:
        ids (sequence of str): Sample ids (n x n kernels) or taxon ids (p x p)
        values (array-like): Symmetric matrix
        provenance (KernelProvenance): Constructor that produced the kernel
    """
    def __init__(self, ids, values, provenance=KernelProvenance.CUSTOM):
        super().__init__(ids, values)
        self.provenance = KernelProvenance(provenance)

    @staticmethod
    def _rebuild(template, ids, values):
        return Kernel(ids, values, template.provenance)

    def eigenvalues(self):
        return np.linalg.eigvalsh(self.values)

    def is_psd(self, tol=0.0):
        """All eigenvalues >= -tol * largest eigenvalue"""
        values = self.eigenvalues()
        top = max(values[-1], 0.0) if values.size else 0.0
        return bool(values.size == 0 or values[0] >= -tol * top)

    @classmethod
    def identity(cls, ids):
        ids = list(ids)
        return cls(ids, np.eye(len(ids)), KernelProvenance.CUSTOM)

    def to_dict(self):
        data = super().to_dict()
        data['provenance'] = self.provenance.value
        return data


class VariationMatrix(SquareMatrix):
    """Aitchison variation matrix T over taxa: nonnegative, zero diagonal"""
    def __init__(self, taxon_ids, values):
        super().__init__(taxon_ids, values)
        if np.any(self.values < 0):
            raise DomainError("Variation matrix entries must be nonnegative")
        if np.any(np.diag(self.values) != 0):
            raise DomainError("Variation matrix must have a zero diagonal")

    @property
    def taxon_ids(self):
        return self.ids


class EdgeMatrix:
    """
    Sample-by-edge matrix E of root-side minus non-root-side mass.

    Args:
        sample_ids (sequence of str): Row identifiers
        edge_ids (sequence of str): One id per tree edge, post-order
        values (array-like): n x q matrix with entries in [-1, 1]
    """
    def __init__(self, sample_ids, edge_ids, values):
        self.sample_ids = _check_ids(sample_ids, "sample")
        self.edge_ids = _check_ids(edge_ids, "edge")
        self.values = _frozen(values, 2)
        if self.values.shape != (len(self.sample_ids), len(self.edge_ids)):
            raise SchemaError(f"Edge matrix shape {self.values.shape} does not match its ids")
        if np.any(np.abs(self.values) > 1 + 1e-12):
            raise DomainError("Edge mass differences must lie in [-1, 1]")

    def to_dict(self):
        return {
            'sample_ids': list(self.sample_ids),
            'edge_ids': list(self.edge_ids),
            'values': self.values.tolist(),
        }


class Composition:
    """Strictly positive vector on the simplex (sums to 1 within 1e-10)"""
    def __init__(self, values):
        self.values = _frozen(values, 1)
        if np.any(self.values <= 0):
            raise DomainError("Composition entries must be strictly positive")
        if abs(self.values.sum() - 1.0) > 1e-10:
            raise DomainError(f"Composition must sum to 1, sums to {self.values.sum()!r}")

    @classmethod
    def close(cls, values):
        """Rescale a positive vector to unit sum"""
        values = np.asarray(values, dtype=float)
        return cls(values / values.sum())


class DataBundle:
    """
    Inputs of one Monte-Carlo scenario.

    Args:
        X (AbundanceTable): Column-centered design
        y_seed (ResponseVector): Response the true signal is projected from
        q_kernel (Kernel, optional): Taxon kernel Q (dpcoa scenario)
        h_kernel (Kernel, optional): Sample kernel H (unifrac and edge scenarios)
        tree (PhyloTree, optional): Tree the kernels were derived from
    """
    def __init__(self, X, y_seed, q_kernel=None, h_kernel=None, tree=None):
        if tuple(y_seed.sample_ids) != tuple(X.sample_ids):
            raise SchemaError("Seed response ids do not match the design's samples")
        if q_kernel is not None:
            q_kernel.check_aligned(X.taxon_ids, "taxon kernel Q")
        if h_kernel is not None:
            h_kernel.check_aligned(X.sample_ids, "sample kernel H")
        self.X = X
        self.y_seed = y_seed
        self.q_kernel = q_kernel
        self.h_kernel = h_kernel
        self.tree = tree
