"""Reference solution from the full eliminated KKT system (small problems).

Unknowns ``[vec(Y); vec(Lam)]``; the two block rows are::

    tau (I x M1) y + (I x tau K^T + C^T x M) lam          = tau (I x M1) vec(Yhat)
    (I x tau K + C x M) y - (tau/beta) (I x N Mb^-1 N^T) lam = 0

which is symmetric whenever ``K`` is.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .linalg import as_csr, multifrontal_solve
from .problem import SylvesterOperator, time_matrix, unvec

MAX_UNKNOWNS = 500_000


class OracleSizeError(ValueError):
    pass


@dataclass
class FullKKTSystem:
    A: sp.csr_matrix
    b: np.ndarray
    n: int
    n_T: int

    @property
    def dim(self) -> int:
        return self.A.shape[0]


def assemble_full(op: SylvesterOperator, max_unknowns: int = MAX_UNKNOWNS) -> FullKKTSystem:
    n, nT, tau, beta = op.n, op.n_T, op.tau, op.beta
    dim = 2 * n * nT
    if dim > max_unknowns:
        raise OracleSizeError(
            f"full KKT system has {dim} unknowns, above the oracle guard {max_unknowns}"
        )
    It = sp.identity(nT, format="csr")
    C = time_matrix(nT)
    calK = sp.kron(It, tau * op.K) + sp.kron(C, op.M)
    calKt = sp.kron(It, tau * op.Kt) + sp.kron(C.T, op.M)
    A = sp.bmat([
        [tau * sp.kron(It, op.M1), calKt],
        [calK, -(tau / beta) * sp.kron(It, op.B)],
    ])
    yhat = (op.Y1 @ op.Y2.T).reshape(-1, order="F")
    b = np.concatenate([tau * (sp.kron(It, op.M1) @ yhat), np.zeros(n * nT)])
    return FullKKTSystem(as_csr(A), b, n, nT)


def solve_full(system: FullKKTSystem, op: SylvesterOperator):
    """Dense ``(Y, Lam, U)`` from a direct sparse solve."""
    n, nT = system.n, system.n_T
    if not np.any(system.b):
        z = np.zeros((n, nT))
        return z, z.copy(), np.zeros((op.N.shape[1], nT))
    x = multifrontal_solve(system.A, system.b)
    Y = unvec(x[: n * nT], n)
    L = unvec(x[n * nT :], n)
    U = (op.N.T @ L) / op.Mb.diagonal()[:, None] / op.beta
    return Y, L, np.asarray(U)


def objective(op: SylvesterOperator, Y, U) -> float:
    """Discrete cost: rectangle rule in time, lumped masses in space."""
    E = Y - op.Y1 @ op.Y2.T
    track = np.sum(E * (op.M1 @ E))
    ctrl = np.sum(U * (op.Mb @ U))
    return float(0.5 * op.tau * track + 0.5 * op.tau * op.beta * ctrl)


def kkt_residuals(op: SylvesterOperator, Y, U, L):
    """Residuals of the three (un-eliminated) optimality equations."""
    tau, beta = op.tau, op.beta
    C = time_matrix(op.n_T)
    yhat = op.Y1 @ op.Y2.T
    # K-calligraphic applied to matrices: tau K Y + M Y C^T
    g_y = tau * (op.M1 @ (Y - yhat)) + tau * (op.Kt @ L) + op.M @ (L @ C)
    g_u = tau * beta * (op.Mb @ U) - tau * (op.N.T @ L)
    g_l = tau * (op.K @ Y) + op.M @ (Y @ C.T) - tau * (op.N @ U)
    return np.asarray(g_y), np.asarray(g_u), np.asarray(g_l)
