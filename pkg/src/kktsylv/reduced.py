"""Direct solver for the projected (reduced) matrix equation.

With ``Z = [Z_Y, Z_L]`` and columns ``y_t``, ``l_t`` the reduced equation is a
two-point recursion in time::

    (A1r + I/tau) y_t - y_{t-1}/tau - A3r l_t / beta = 0
    A2r y_t + (A1r' + I/tau) l_t - l_{t+1}/tau        = F1r Y2[t]

i.e. a block-tridiagonal system in ``w_t = (y_t, l_t)`` with ``2p x 2p``
diagonal blocks, solved by block elimination (forward sweep, back
substitution). :func:`reduced_kronecker_matrix` builds the same system as
an explicit sparse Kronecker sum for cross-checking.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .linalg import PIVOT_TOL, SingularMatrixError, as_csr
from .problem import time_matrix


@dataclass
class Projection:
    """Projected coefficients ``V^T A V`` of the left matrices and ``V^T F1``."""

    A1: np.ndarray
    A2: np.ndarray
    A3: np.ndarray
    F1: np.ndarray
    A1t: np.ndarray | None = None

    @property
    def p(self) -> int:
        return self.A1.shape[0]

    @property
    def A1_lam(self) -> np.ndarray:
        return self.A1 if self.A1t is None else self.A1t


def _lu(S):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(S, check_finite=False)
    d = np.abs(np.diag(lu))
    if not np.all(np.isfinite(d)) or d.min() <= PIVOT_TOL * max(d.max(), 1.0):
        raise SingularMatrixError("reduced system is singular")
    return lu, piv


def solve_reduced(proj: Projection, Y2: np.ndarray, tau: float, beta: float) -> np.ndarray:
    """Return ``Z`` (``p x 2 n_T``) solving the reduced equation."""
    p = proj.p
    nT = Y2.shape[0]
    if p == 0:
        return np.zeros((0, 2 * nT))
    I = np.eye(p)
    Dblk = np.block([
        [proj.A1 + I / tau, -proj.A3 / beta],
        [proj.A2, proj.A1_lam + I / tau],
    ])
    rhs = np.zeros((2 * p, nT))
    rhs[p:] = proj.F1 @ Y2.T

    factors = []
    eye_low = np.vstack([np.zeros((p, p)), I])
    btil = rhs[:, 0].copy()
    S = Dblk
    for t in range(nT):
        if t > 0:
            S = Dblk.copy()
            S[:p, p:] -= G / tau**2
            btil = rhs[:, t].copy()
            btil[:p] += prev[:p] / tau
        lu = _lu(S)
        factors.append((lu, btil))
        prev = scipy.linalg.lu_solve(lu, btil, check_finite=False)
        if t < nT - 1:
            G = scipy.linalg.lu_solve(lu, eye_low, check_finite=False)[:p]

    W = np.empty((2 * p, nT))
    nxt = None
    for t in range(nT - 1, -1, -1):
        lu, btil = factors[t]
        b = btil.copy()
        if nxt is not None:
            b[p:] += nxt[p:] / tau
        W[:, t] = scipy.linalg.lu_solve(lu, b, check_finite=False)
        nxt = W[:, t]
    return np.hstack([W[:p], W[p:]])


def reduced_nbytes(p: int, nT: int) -> int:
    # one LU (2p x 2p) plus pivots and a 2p right-hand side per time step
    return 8 * nT * (4 * p * p + 4 * p)


def reduced_kronecker_matrix(proj: Projection, nT: int, tau: float, beta: float,
                             alpha2: float = 0.0, alpha3: float = 0.0) -> sp.csr_matrix:
    """Explicit reduced system acting on ``vec(Z)``.

    With nonzero ``alpha2``/``alpha3`` the shifted coefficients are used
    literally, which gives an independent check that the transforms leave
    the solution unchanged.
    """
    p = proj.p
    Ct = time_matrix(nT) / tau
    Z0 = sp.csr_matrix((nT, nT))
    I = sp.identity(nT, format="csr")
    C1 = sp.bmat([[Ct.T, Z0], [Z0, Ct]])
    I0 = sp.bmat([[Z0, I], [Z0, Z0]])
    D = sp.bmat([[Z0, Z0], [-I / beta, Z0]])
    EY = sp.bmat([[I, Z0], [Z0, Z0]])
    EL = sp.bmat([[Z0, Z0], [Z0, I]])
    Ip = np.eye(p)
    A1, A2, A3 = proj.A1, proj.A2, proj.A3
    S = (
        sp.kron(EY.T, A1) + sp.kron(EL.T, proj.A1_lam)
        - alpha3 * sp.kron(D.T, A1)
        + sp.kron((C1 - alpha2 * I0).T, Ip)
        + sp.kron(I0.T, A2 + alpha2 * Ip)
        + sp.kron(D.T, A3 + alpha3 * A1)
    )
    return as_csr(S)


def reduced_rhs(proj: Projection, Y2: np.ndarray) -> np.ndarray:
    nT = Y2.shape[0]
    F = np.zeros((proj.p, 2 * nT))
    F[:, nT:] = proj.F1 @ Y2.T
    return F.reshape(-1, order="F")


def apply_reduced(proj: Projection, Z: np.ndarray, Y2: np.ndarray, tau: float, beta: float) -> np.ndarray:
    """Left side minus right side of the reduced matrix equation at ``Z``."""
    nT = Y2.shape[0]
    ZY, ZL = Z[:, :nT], Z[:, nT:]
    top = proj.A1 @ ZY - proj.A3 @ ZL / beta
    top[:, :] += ZY / tau
    top[:, 1:] -= ZY[:, :-1] / tau
    bot = proj.A1_lam @ ZL + proj.A2 @ ZY - proj.F1 @ Y2.T
    bot[:, :] += ZL / tau
    bot[:, :-1] -= ZL[:, 1:] / tau
    return np.hstack([top, bot])
