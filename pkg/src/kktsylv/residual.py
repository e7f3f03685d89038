"""Residual norms of the two eliminated KKT equations in low-rank form.

For ``Y = V Z_Y`` and ``Lam = V Z_L``::

    R1 = tau M1 Y + tau K^T Lam + M Lam C - tau M1 Y1 Y2^T
    R2 = tau K Y + M Y C^T - (tau/beta) N Mb^-1 N^T Lam

Each residual is ``R_L R_R^T`` with a tall left factor that only changes when
basis vectors are added, so the left factor is kept as an updated QR pair and
the norm is ``||R_fac R_R^T||_F``, an ``q x n_T`` computation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import frobenius_norm
from .problem import SylvesterOperator, time_matrix

DEFICIENT_TOL = 1e-12


@dataclass(frozen=True)
class ResidualNorms:
    r1: float
    r2: float
    rho3: float

    @property
    def worst(self) -> float:
        return max(self.r1, self.r2, self.rho3)


def stopping_check(norms: ResidualNorms, tol: float) -> bool:
    return norms.worst <= tol


def c_right(Z):
    """``Z @ C``: column t is ``z_t - z_{t+1}``."""
    out = Z.copy()
    out[:, :-1] -= Z[:, 1:]
    return out


def ct_right(Z):
    """``Z @ C^T``: column t is ``z_t - z_{t-1}``."""
    out = Z.copy()
    out[:, 1:] -= Z[:, :-1]
    return out


class ResidualFactors:
    """Left factor ``R_L = Q1 R_fac`` grown column by column.

    ``blocks`` maps an ``n x k`` block of basis vectors to a list of
    ``n x k`` left-factor blocks; ``head`` holds columns that do not belong to
    any basis vector (the desired-state term).
    """

    def __init__(self, blocks, nblocks: int, head: np.ndarray | None = None):
        self.blocks = blocks
        self.nblocks = nblocks
        self.nhead = 0 if head is None else head.shape[1]
        self.Q = None
        self.R = np.zeros((0, 0))
        self.p = 0
        self.deficient = 0
        if head is not None:
            for c in head.T:
                self._append_column(c)

    @property
    def q(self) -> int:
        return self.R.shape[1]

    def _append_column(self, c):
        c = np.asarray(c, dtype=float)
        cnorm = np.linalg.norm(c)
        if self.Q is None:
            self.Q = np.zeros((c.shape[0], 0))
        h = self.Q.T @ c
        w = c - self.Q @ h
        h2 = self.Q.T @ w
        w -= self.Q @ h2
        h += h2
        rho = np.linalg.norm(w)
        k, q = self.R.shape
        if rho <= DEFICIENT_TOL * cnorm or cnorm == 0.0:
            R = np.zeros((k, q + 1))
            R[:, :q] = self.R
            R[:, q] = h
            self.R = R
            self.deficient += 1
            return
        R = np.zeros((k + 1, q + 1))
        R[:k, :q] = self.R
        R[:k, q] = h
        R[k, q] = rho
        self.R = R
        self.Q = np.column_stack([self.Q, w / rho])

    def append_basis_vectors(self, V):
        """Add the left-factor columns of every column of ``V`` (in order)."""
        V = np.atleast_2d(np.asarray(V, dtype=float).T).T
        if V.shape[1] == 0:
            return
        blk = self.blocks(V)
        for j in range(V.shape[1]):
            for b in blk:
                self._append_column(b[:, j])
        self.p += V.shape[1]

    def rotate(self, U: np.ndarray):
        """Basis changed to ``V @ U``; rewrite the factor without new products."""
        p, pt = U.shape
        if p != self.p:
            raise ValueError("rotation does not match the tracked basis size")
        nb, h = self.nblocks, self.nhead
        T = np.zeros((self.q, h + nb * pt))
        T[:h, :h] = np.eye(h)
        for b in range(nb):
            # old column of vector j, block b sits at h + nb*j + b
            T[h + b : h + nb * p : nb, h + b : h + nb * pt : nb] = U
        Rt = self.R @ T
        Qh, Rh = np.linalg.qr(Rt, mode="reduced")
        self.Q = self.Q @ Qh
        self.R = Rh
        self.p = pt

    def left_factor(self) -> np.ndarray:
        return self.Q @ self.R


class ResidualTracker:
    """Both residual trackers plus the scaling data for the backward error."""

    def __init__(self, op: SylvesterOperator):
        self.op = op
        tau, beta = op.tau, op.beta
        M, M1, K, Kt, B = op.M, op.M1, op.K, op.Kt, op.B
        self.f1 = ResidualFactors(
            lambda V: [tau * (M1 @ V), tau * (Kt @ V), M @ V], 3, head=-tau * (M1 @ op.Y1)
        )
        self.f2 = ResidualFactors(
            lambda V: [tau * (K @ V), M @ V, (tau / beta) * (B @ V)], 3
        )
        self.norm_M = frobenius_norm(M)
        self.norm_M1 = frobenius_norm(M1)
        self.norm_K = frobenius_norm(K)
        self.norm_B = frobenius_norm(B)
        self.norm_C = frobenius_norm(time_matrix(op.n_T))
        Y1, Y2 = op.Y1, op.Y2
        self.norm_Yhat = float(np.sqrt(max(((Y1.T @ Y1) * (Y2.T @ Y2)).sum(), 0.0)))

    def append(self, V):
        self.f1.append_basis_vectors(V)
        self.f2.append_basis_vectors(V)

    def rotate(self, U):
        self.f1.rotate(U)
        self.f2.rotate(U)

    @property
    def q(self) -> tuple[int, int]:
        return self.f1.q, self.f2.q

    @property
    def nbytes(self) -> int:
        return sum(8 * (f.Q.size + f.R.size) for f in (self.f1, self.f2) if f.Q is not None)

    def right_factors(self, Z):
        nT = self.op.n_T
        ZY, ZL = Z[:, :nT], Z[:, nT:]
        p = Z.shape[0]
        R1 = np.empty((self.f1.nhead + 3 * p, nT))
        R1[: self.f1.nhead] = self.op.Y2.T
        h = self.f1.nhead
        R1[h + 0 :: 3] = ZY
        R1[h + 1 :: 3] = ZL
        R1[h + 2 :: 3] = c_right(ZL)
        R2 = np.empty((3 * p, nT))
        R2[0::3] = ZY
        R2[1::3] = ct_right(ZY)
        R2[2::3] = -ZL
        return R1, R2

    def residual_norms(self, Z) -> ResidualNorms:
        op = self.op
        if Z.shape[0] != self.f1.p:
            raise ValueError("reduced solution does not match the tracked basis")
        R1r, R2r = self.right_factors(Z)
        r1 = float(np.linalg.norm(self.f1.R @ R1r)) if self.f1.q else 0.0
        r2 = float(np.linalg.norm(self.f2.R @ R2r)) if self.f2.q else 0.0
        nT = op.n_T
        zy = float(np.linalg.norm(Z[:, :nT]))
        zl = float(np.linalg.norm(Z[:, nT:]))
        rho3 = backward_error(r1, r2, zy, zl, self, op)
        return ResidualNorms(r1, r2, rho3)


def backward_error(r1, r2, zy, zl, scal, op) -> float:
    tau, beta = op.tau, op.beta
    d1 = tau * (scal.norm_M1 * zy + scal.norm_K * zl + scal.norm_M1 * scal.norm_Yhat) \
        + scal.norm_M * zl * scal.norm_C
    d2 = tau * (scal.norm_K * zy + scal.norm_B * zl / beta) + scal.norm_M * zy * scal.norm_C
    rho = 0.0
    if r1 > 0.0:
        rho += r1 / d1 if d1 > 0 else np.inf
    if r2 > 0.0:
        rho += r2 / d2 if d2 > 0 else np.inf
    return float(rho)


def dense_residuals(op: SylvesterOperator, Y, L):
    """``R1`` and ``R2`` formed explicitly (small instances only)."""
    tau, beta = op.tau, op.beta
    R1 = tau * (op.M1 @ Y) + tau * (op.Kt @ L) + op.M @ c_right(L) - tau * (op.M1 @ (op.Y1 @ op.Y2.T))
    R2 = tau * (op.K @ Y) + op.M @ ct_right(Y) - (tau / beta) * (op.B @ L)
    return R1, R2
