"""Small dense/sparse linear-algebra layer shared by the rest of the package.

Sparse matrices are ``scipy.sparse.csr_matrix``; dense matrices are plain
``numpy`` arrays. The helpers here add the few things scipy does not give
directly: a singularity-checked sparse LU, a breakdown-aware two-pass
Gram-Schmidt append, and MatrixMarket I/O pinned to the ``general`` layout.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

BREAKDOWN_TOL = 1e-12
PIVOT_TOL = 1e-14


class SingularMatrixError(ArithmeticError):
    """Raised when a factorization meets a zero or negligible pivot."""


def as_csr(A) -> sp.csr_matrix:
    """Return ``A`` as a canonical CSR matrix (sorted indices, no duplicates)."""
    A = sp.csr_matrix(A, dtype=float)
    A.sum_duplicates()
    A.sort_indices()
    return A


@dataclass
class SparseFactorization:
    """LU factors of a square sparse matrix, reusable for many right-hand sides."""

    lu: spla.SuperLU
    shape: tuple[int, int]
    symmetric: bool = False
    nnz_factors: int = field(init=False)

    def __post_init__(self):
        self.nnz_factors = int(self.lu.L.nnz + self.lu.U.nnz)

    def solve(self, b: np.ndarray, trans: bool = False) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        return self.lu.solve(b, trans="T" if trans else "N")

    @property
    def nbytes(self) -> int:
        # values + row indices of L and U
        return 12 * self.nnz_factors


def sparse_factorize(A, symmetric: bool = False) -> SparseFactorization:
    """Factorize a square sparse matrix with SuperLU.

    Raises :class:`SingularMatrixError` on an exactly zero pivot or when the
    smallest pivot of ``U`` is below ``PIVOT_TOL`` relative to the largest.
    """
    A = sp.csc_matrix(A, dtype=float)
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"matrix must be square, got {A.shape}")
    if A.shape[0] == 0:
        raise SingularMatrixError("empty matrix")
    # symmetric pattern -> MMD on A^T+A keeps fill low for FE matrices
    permc = "MMD_AT_PLUS_A" if symmetric else "COLAMD"
    try:
        lu = spla.splu(A, permc_spec=permc)
    except RuntimeError as exc:
        raise SingularMatrixError(str(exc)) from exc
    piv = np.abs(lu.U.diagonal())
    if piv.size and (not np.all(np.isfinite(piv)) or piv.min() <= PIVOT_TOL * piv.max()):
        raise SingularMatrixError(
            f"pivot {piv.min():.3e} below threshold (max pivot {piv.max():.3e})"
        )
    return SparseFactorization(lu, A.shape, symmetric)


def multifrontal_solve(A, b: np.ndarray) -> np.ndarray:
    """One-shot solve with UMFPACK (through cvxopt).

    Used for the large indefinite space-time systems, where SuperLU's
    column orderings fill in far more than UMFPACK's.
    """
    from cvxopt import matrix, spmatrix, umfpack

    A = sp.coo_matrix(A, dtype=float)
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"matrix must be square, got {A.shape}")
    Ac = spmatrix(matrix(A.data), matrix(A.row.astype(int)), matrix(A.col.astype(int)), A.shape)
    x = matrix(np.asarray(b, dtype=float).reshape(-1))
    try:
        umfpack.linsolve(Ac, x)
    except ArithmeticError as exc:
        raise SingularMatrixError(f"UMFPACK: {exc}") from exc
    return np.array(x).reshape(-1)


def gram_schmidt_append(V: np.ndarray, w: np.ndarray, tol: float = BREAKDOWN_TOL):
    """Orthogonalize ``w`` against the orthonormal columns of ``V``.

    Two passes of classical Gram-Schmidt. Returns ``(v, h)`` where ``h`` holds
    the accumulated projection coefficients and ``v`` is the new unit vector,
    or ``None`` when ``w`` already lies in ``span(V)`` (relative to ``tol``).
    """
    w = np.array(w, dtype=float).reshape(-1)
    wnorm = np.linalg.norm(w)
    if V is None or V.shape[1] == 0:
        if wnorm == 0.0:
            return None, np.zeros(0)
        return w / wnorm, np.zeros(0)
    h = V.T @ w
    w = w - V @ h
    h2 = V.T @ w
    w = w - V @ h2
    h = h + h2
    rnorm = np.linalg.norm(w)
    if wnorm == 0.0 or rnorm <= tol * wnorm:
        return None, h
    return w / rnorm, h


def orthonormalize(W: np.ndarray, V: np.ndarray | None = None, tol: float = BREAKDOWN_TOL):
    """Append the columns of ``W`` one by one to ``V``; skip in-span columns.

    Returns the new columns only, as an ``n x k`` array (``k`` may be 0).
    """
    n = W.shape[0]
    basis = np.zeros((n, 0)) if V is None else V
    new = []
    for j in range(W.shape[1]):
        v, _ = gram_schmidt_append(basis, W[:, j], tol)
        if v is None:
            continue
        new.append(v)
        basis = np.column_stack([basis, v])
    if not new:
        return np.zeros((n, 0))
    return np.column_stack(new)


def dense_svd(Z: np.ndarray):
    """Thin SVD ``Z = U diag(s) Vt`` with singular values in descending order."""
    Z = np.asarray(Z, dtype=float)
    if Z.size == 0:
        k = min(Z.shape)
        return np.zeros((Z.shape[0], k)), np.zeros(k), np.zeros((k, Z.shape[1]))
    return scipy.linalg.svd(Z, full_matrices=False, lapack_driver="gesdd")


def dense_solve(A, b: np.ndarray) -> np.ndarray:
    """Direct solve for a dense or sparse square system."""
    if sp.issparse(A):
        return sparse_factorize(A).solve(b)
    A = np.asarray(A, dtype=float)
    try:
        with warnings.catch_warnings():
            # singularity is reported below through our own pivot check
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            lu, piv = scipy.linalg.lu_factor(A, check_finite=True)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise SingularMatrixError(str(exc)) from exc
    d = np.abs(np.diag(lu))
    if d.size and d.min() <= PIVOT_TOL * d.max():
        raise SingularMatrixError(f"pivot {d.min():.3e} below threshold")
    return scipy.linalg.lu_solve((lu, piv), b)


def frobenius_norm(A) -> float:
    if sp.issparse(A):
        return float(spla.norm(A, "fro"))
    return float(np.linalg.norm(np.asarray(A, dtype=float)))


def trace_product(A, B) -> float:
    """``trace(A^T B)`` without forming the product."""
    if sp.issparse(A) or sp.issparse(B):
        return float(sp.csr_matrix(A).multiply(sp.csr_matrix(B)).sum())
    return float(np.vdot(np.asarray(A, dtype=float), np.asarray(B, dtype=float)))


def write_matrix_market(path, A, comment: str = "") -> None:
    """Write ``A`` (dense or sparse) in MatrixMarket coordinate/general format."""
    A = sp.coo_matrix(A)
    # a file handle keeps the name as given (a bare path gains ".mtx")
    with open(path, "wb") as fh:
        scipy.io.mmwrite(fh, A, comment=comment, field="real", symmetry="general")


def read_matrix_market(path) -> np.ndarray | sp.csr_matrix:
    """Read a MatrixMarket file; coordinate files come back as CSR."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        A = scipy.io.mmread(str(path))
    except (ValueError, IndexError) as exc:
        raise ValueError(f"{path}: not a valid MatrixMarket file ({exc})") from exc
    if sp.issparse(A):
        return as_csr(A)
    return np.asarray(A, dtype=float)
