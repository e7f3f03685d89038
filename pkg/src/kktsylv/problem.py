"""The generalized Sylvester operator behind the eliminated KKT system.

With ``X = [Y, Lam]`` (``n x 2 n_T``) the optimality system becomes::

    A1 X + X C1 + A2 X I0 + A3 X D - F1 F2^T = 0

where ``A1 = M^-1 K``, ``A2 = M^-1 M1``, ``A3 = M^-1 N Mb^-1 N^T``,
``C1 = blkdiag(Ct^T, Ct)`` with ``Ct = C / tau``, ``I0 = [[0, I], [0, 0]]``,
``D = [[0, 0], [-I/beta, 0]]``, ``F1 = A2 Y1`` and ``F2 = [0; Y2]``.

The right coefficients are never formed; their action is a bidiagonal sweep
or a block swap. In the nonsymmetric case the Lam-block uses ``M^-1 K^T``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from .discretize import DesiredState, DiscretizedPDE
from .linalg import as_csr, frobenius_norm

ALPHA2_POWER_STEPS = 20
ALPHA2_SEED = 12345


class CaseTag(str, enum.Enum):
    FULL_OBSERVATION = "i"
    PARTIAL_OBSERVATION = "ii"
    BOUNDARY_CONTROL = "iii"
    NONSYMMETRIC = "iv"

    @classmethod
    def parse(cls, value) -> "CaseTag":
        if isinstance(value, cls):
            return value
        aliases = {
            "i": cls.FULL_OBSERVATION, "full": cls.FULL_OBSERVATION,
            "ii": cls.PARTIAL_OBSERVATION, "partial": cls.PARTIAL_OBSERVATION,
            "iii": cls.BOUNDARY_CONTROL, "boundary": cls.BOUNDARY_CONTROL,
            "iv": cls.NONSYMMETRIC, "nonsymmetric": cls.NONSYMMETRIC,
        }
        try:
            return aliases[str(value).strip().lower()]
        except KeyError:
            raise ValueError(f"unknown case tag {value!r}") from None


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_T: int

    def __post_init__(self):
        if self.n_T < 1:
            raise ValueError("n_T must be >= 1")
        if not self.T > 0:
            raise ValueError("final time must be positive")

    @property
    def tau(self) -> float:
        return self.T / self.n_T


def time_matrix(n_T: int) -> sp.csr_matrix:
    """Lower bidiagonal ``C`` with 1 on the diagonal and -1 below."""
    return sp.diags([np.ones(n_T), -np.ones(n_T - 1)], [0, -1], format="csr")


def is_diagonal(A) -> bool:
    A = sp.coo_matrix(A)
    return bool(np.all(A.row == A.col) or A.nnz == 0)


def _sym_exact(A) -> bool:
    return (as_csr(A) != as_csr(A).T).nnz == 0


@dataclass(frozen=True)
class SylvesterOperator:
    M: sp.csr_matrix
    K: sp.csr_matrix
    M1: sp.csr_matrix
    N: sp.csr_matrix
    Mb: sp.csr_matrix
    Y1: np.ndarray
    Y2: np.ndarray
    tau: float
    beta: float
    case: CaseTag
    alpha2: float = 0.0
    alpha3: float = 0.0

    # derived data, filled in by build_operator
    minv: np.ndarray = None          # diagonal of M^-1
    a2: np.ndarray = None            # diagonal of A2
    B: sp.csr_matrix = None          # N Mb^-1 N^T
    Kt: sp.csr_matrix = None

    @property
    def n(self) -> int:
        return self.M.shape[0]

    @property
    def n_T(self) -> int:
        return self.Y2.shape[0]

    @property
    def r(self) -> int:
        return self.Y1.shape[1]

    @property
    def split(self) -> bool:
        return self.case is CaseTag.NONSYMMETRIC

    @property
    def F1(self) -> np.ndarray:
        return self.a2[:, None] * self.Y1

    # left coefficients --------------------------------------------------
    def A1(self, V):
        return _diag_mul(self.minv, self.K @ V)

    def A1t(self, V):
        """``M^-1 K^T`` (the Lam-block coefficient in the split form)."""
        return _diag_mul(self.minv, self.Kt @ V)

    def A1_lam(self, V):
        return self.A1t(V) if self.split else self.A1(V)

    def A2(self, V):
        return _diag_mul(self.a2, V)

    def A3(self, V):
        return _diag_mul(self.minv, self.B @ V)

    def left_matrix(self, name: str) -> sp.csr_matrix:
        Minv = sp.diags(self.minv)
        mats = {
            "A1": Minv @ self.K,
            "A1t": Minv @ self.Kt,
            "A2": sp.diags(self.a2),
            "A3": Minv @ self.B,
        }
        return as_csr(mats[name])

    # right coefficients (structural) ------------------------------------
    def right_C1(self, X):
        Y, L = self._split(X)
        return np.hstack([ct_t_right(Y, self.tau), ct_right(L, self.tau)])

    def right_I0(self, X):
        Y, _ = self._split(X)
        return np.hstack([np.zeros_like(Y), Y])

    def right_D(self, X):
        _, L = self._split(X)
        return np.hstack([-L / self.beta, np.zeros_like(L)])

    def right_dense(self, name: str) -> np.ndarray:
        """Dense ``2 n_T x 2 n_T`` right coefficient (small instances only)."""
        nt = self.n_T
        I, Z = np.eye(nt), np.zeros((nt, nt))
        Ct = time_matrix(nt).toarray() / self.tau
        mats = {
            "C1": np.block([[Ct.T, Z], [Z, Ct]]),
            "I0": np.block([[Z, I], [Z, Z]]),
            "D": np.block([[Z, Z], [-I / self.beta, Z]]),
            "EY": np.block([[I, Z], [Z, Z]]),
            "EL": np.block([[Z, Z], [Z, I]]),
        }
        return mats[name]

    def _split(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != 2 * self.n_T:
            raise ValueError(f"expected {2 * self.n_T} columns, got shape {X.shape}")
        return X[:, : self.n_T], X[:, self.n_T :]

    def rhs(self) -> np.ndarray:
        """Dense ``F1 F2^T`` (small instances only)."""
        out = np.zeros((self.n, 2 * self.n_T))
        out[:, self.n_T :] = self.F1 @ self.Y2.T
        return out

    def summary(self) -> dict:
        return {
            "n": self.n, "n_T": self.n_T, "r": self.r, "n_b": self.N.shape[1],
            "case": self.case.value, "alpha2": self.alpha2, "alpha3": self.alpha3,
            "beta": self.beta, "tau": self.tau,
        }


def _diag_mul(d, V):
    V = np.asarray(V)
    return d * V if V.ndim == 1 else d[:, None] * V


def ct_right(L, tau):
    """``L @ (C / tau)``: column t is ``(l_t - l_{t+1}) / tau``."""
    out = L.copy()
    out[:, :-1] -= L[:, 1:]
    return out / tau


def ct_t_right(Y, tau):
    """``Y @ (C / tau)^T``: column t is ``(y_t - y_{t-1}) / tau``."""
    out = Y.copy()
    out[:, 1:] -= Y[:, :-1]
    return out / tau


def detect_case(pde: DiscretizedPDE) -> CaseTag:
    partial = (pde.M1 != pde.M).nnz > 0
    boundary = pde.N.shape[1] != pde.N.shape[0] or (pde.N != pde.M).nnz > 0
    nonsym = not _sym_exact(pde.K)
    flags = [partial, boundary, nonsym]
    if sum(flags) > 1:
        raise ValueError(
            "partial observation, boundary control and nonsymmetric K can only occur one at a time"
        )
    if partial:
        return CaseTag.PARTIAL_OBSERVATION
    if boundary:
        return CaseTag.BOUNDARY_CONTROL
    if nonsym:
        return CaseTag.NONSYMMETRIC
    return CaseTag.FULL_OBSERVATION


def build_operator(pde: DiscretizedPDE, tg: TimeGrid, beta: float, yhat: DesiredState,
                   case=None, transforms: bool = True) -> SylvesterOperator:
    """Assemble the Sylvester operator; optionally apply the alpha2/alpha3 transforms."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    for name in ("M", "M1", "Mb"):
        if not is_diagonal(getattr(pde, name)):
            raise ValueError(f"{name} must be diagonal (lumped) for the elimination step")
    mdiag = pde.M.diagonal()
    if np.any(mdiag <= 0):
        raise ValueError("M must have a strictly positive diagonal")
    if yhat.Y1.shape[0] != pde.n or yhat.Y2.shape[0] != tg.n_T:
        raise ValueError("desired state does not match the discretization")
    detected = detect_case(pde)
    case = detected if case is None else CaseTag.parse(case)
    _check_case(case, pde)
    mbinv = 1.0 / pde.Mb.diagonal()
    B = as_csr(pde.N @ sp.diags(mbinv) @ pde.N.T)
    op = SylvesterOperator(
        M=pde.M, K=pde.K, M1=pde.M1, N=pde.N, Mb=pde.Mb,
        Y1=np.asarray(yhat.Y1, float), Y2=np.asarray(yhat.Y2, float),
        tau=tg.tau, beta=float(beta), case=case,
        minv=1.0 / mdiag, a2=pde.M1.diagonal() / mdiag, B=B, Kt=as_csr(pde.K.T),
    )
    if transforms:
        op = apply_transforms(op)
    return op


def _check_case(case: CaseTag, pde: DiscretizedPDE):
    square = pde.N.shape[1] == pde.N.shape[0]
    if case is CaseTag.BOUNDARY_CONTROL and square and (pde.N != pde.M).nnz == 0:
        raise ValueError("boundary-control case requires a restricted control operator")
    if case is not CaseTag.BOUNDARY_CONTROL and not square:
        raise ValueError(f"case {case.value} requires a square control operator")


def apply_transforms(op: SylvesterOperator) -> SylvesterOperator:
    if op.case is CaseTag.BOUNDARY_CONTROL:
        return replace(op, alpha3=compute_alpha3(op))
    return replace(op, alpha2=compute_alpha2(op))


def compute_alpha2(op: SylvesterOperator, steps: int = ALPHA2_POWER_STEPS,
                   seed: int = ALPHA2_SEED) -> float:
    """Rough largest-eigenvalue estimate of ``A1`` by power iteration."""
    x = np.random.default_rng(seed).standard_normal(op.n)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(steps):
        y = op.A1(x)
        lam = float(np.linalg.norm(y))
        if lam == 0.0:
            break
        x = y / lam
    return lam


def compute_alpha3(op: SylvesterOperator) -> float:
    """``||A3||_F / (sqrt(beta) ||A1||_F)``."""
    a1 = frobenius_norm(op.left_matrix("A1"))
    a3 = frobenius_norm(op.left_matrix("A3"))
    if a1 == 0.0:
        return 0.0
    return a3 / (np.sqrt(op.beta) * a1)


def apply_operator(op: SylvesterOperator, X, transformed: bool = False) -> np.ndarray:
    """Residual of the matrix equation at ``X``.

    ``transformed=True`` evaluates the alpha2/alpha3-rewritten form term by
    term; both forms are algebraically identical.
    """
    Y, L = op._split(X)
    if op.split:
        a1x = np.hstack([op.A1(Y), op.A1t(L)])
    else:
        a1x = op.A1(np.asarray(X, dtype=float))
    rhs = np.hstack([np.zeros((op.n, op.n_T)), op.F1 @ op.Y2.T])
    if not transformed:
        return a1x + op.right_C1(X) + op.A2(op.right_I0(X)) + op.A3(op.right_D(X)) - rhs

    a2, a3 = op.alpha2, op.alpha3
    # A1 X (I - a3 D): the D-part only touches the Y block
    XD = op.right_D(X)
    term1 = a1x - a3 * op.A1(XD)
    term2 = op.right_C1(X) - a2 * op.right_I0(X)
    XI0 = op.right_I0(X)
    term3 = op.A2(XI0) + a2 * XI0
    term4 = op.A3(XD) + a3 * op.A1(XD)
    return term1 + term2 + term3 + term4 - rhs


def kronecker_matrix(op: SylvesterOperator, transformed: bool = False) -> sp.csr_matrix:
    """Explicit ``n 2n_T`` square matrix acting on ``vec(X)`` (column-major)."""
    A1 = op.left_matrix("A1")
    A2 = op.left_matrix("A2")
    A3 = op.left_matrix("A3")
    In = sp.identity(op.n, format="csr")
    I2 = sp.identity(2 * op.n_T, format="csr")
    R = {k: sp.csr_matrix(op.right_dense(k)) for k in ("C1", "I0", "D", "EY", "EL")}
    if op.split:
        left1 = sp.kron(R["EY"].T, A1) + sp.kron(R["EL"].T, op.left_matrix("A1t"))
    else:
        left1 = sp.kron(I2, A1)
    if not transformed:
        S = left1 + sp.kron(R["C1"].T, In) + sp.kron(R["I0"].T, A2) + sp.kron(R["D"].T, A3)
        return as_csr(S)
    a2, a3 = op.alpha2, op.alpha3
    S = (
        left1 - a3 * sp.kron(R["D"].T, A1)
        + sp.kron((R["C1"] - a2 * R["I0"]).T, In)
        + sp.kron(R["I0"].T, A2 + a2 * In)
        + sp.kron(R["D"].T, A3 + a3 * A1)
    )
    return as_csr(S)


def vec(X) -> np.ndarray:
    return np.asarray(X).reshape(-1, order="F")


def unvec(x, nrows: int) -> np.ndarray:
    return np.asarray(x).reshape(nrows, -1, order="F")
