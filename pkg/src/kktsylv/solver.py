"""Rational Krylov Galerkin solver for the KKT Sylvester equation.

One iteration: pick shifts from the projected spectra, add one or two
shifted-inverse directions to the basis, update the projected coefficients,
solve the reduced equation, evaluate the residual norms through the QR
trackers and optionally truncate the basis by an SVD of ``Z``.
"""

from __future__ import annotations

import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .linalg import SingularMatrixError, dense_svd, orthonormalize, sparse_factorize
from .problem import CaseTag, SylvesterOperator, compute_alpha2
from .reduced import Projection, reduced_nbytes, solve_reduced
from .residual import ResidualNorms, ResidualTracker, stopping_check
from .shifts import adaptive_shift, ritz_values

log = logging.getLogger(__name__)

MIN_TOL = 1e-8
RANK_TOL = 1e-10
STAGNATION_STEPS = 3
STAGNATION_DECREASE = 0.01
FACTOR_CACHE = 16


class SolverError(RuntimeError):
    pass


class StagnationError(SolverError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class ReducedSystemError(SolverError):
    pass


@dataclass
class SolverConfig:
    tol: float = 1e-4
    max_iters: int = 200
    truncation: str = "off"            # "off" | "threshold"
    threshold: float = 1e-12
    truncate_every: int = 1
    reduced_solve: str = "sparse-direct"
    shift_seed: int = 12345
    recipe: CaseTag | None = None      # override the subspace recipe
    n_candidates: int = 200
    check_invariants: bool = False
    continuation: str = "auto"         # "auto" | "latest" | "residual"

    def validate(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.tol < MIN_TOL:
            raise ValueError(
                f"tol={self.tol:g} is below the accuracy floor {MIN_TOL:g}: residual norms are "
                "evaluated through a trace identity that is only reliable to about "
                "sqrt(machine epsilon), and the exact discrete solution itself leaves a "
                "residual of order 1e-9"
            )
        if self.tol >= 1:
            raise ValueError("tol must be below 1")
        if self.truncation not in ("off", "threshold"):
            raise ValueError(f"unknown truncation mode {self.truncation!r}")
        if not 0 < self.threshold < 1:
            raise ValueError("truncation threshold must lie in (0, 1)")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.truncate_every < 1:
            raise ValueError("truncate_every must be >= 1")
        if self.continuation not in ("auto", "latest", "residual"):
            raise ValueError(f"unknown continuation {self.continuation!r}")
        if self.reduced_solve != "sparse-direct":
            raise ValueError(f"unknown reduced-solve method {self.reduced_solve!r}")
        return self


@dataclass
class IterationRecord:
    iteration: int
    p: int
    r1: float
    r2: float
    rho3: float
    wall: float


@dataclass
class SolveReport:
    iterations: int = 0
    p: int = 0
    rank: int = 0
    history: list = field(default_factory=list)
    wall_time: float = 0.0
    memory_bytes: int = 0
    converged: bool = False
    message: str = ""
    case: str = ""
    alpha2: float = 0.0
    alpha3: float = 0.0
    norms: ResidualNorms | None = None

    @property
    def memory_mb(self) -> float:
        return self.memory_bytes / 2**20


@dataclass
class Solution:
    V: np.ndarray
    Z: np.ndarray
    report: SolveReport

    def __iter__(self):
        return iter((self.V, self.Z, self.report))


class KrylovState:
    """Orthonormal basis, stored products ``A V`` and their projections."""

    def __init__(self, op: SylvesterOperator, recipe: CaseTag):
        self.op = op
        self.recipe = recipe
        self.V = np.zeros((op.n, 0))
        self.W = {k: np.zeros((op.n, 0)) for k in self._keys()}
        self.P = {k: np.zeros((0, 0)) for k in self._keys()}
        self.F1r = np.zeros((0, op.r))
        self.shifts1: list[float] = []
        self.shifts2: list[float] = []
        self.directions = np.zeros((op.n, 0))
        self.Z = np.zeros((0, 2 * op.n_T))

    def _keys(self):
        keys = ["A1", "A2", "A3"]
        if self.op.split:
            keys.append("A1t")
        return keys

    @property
    def p(self) -> int:
        return self.V.shape[1]

    def _apply(self, key, V):
        op = self.op
        return {"A1": op.A1, "A2": op.A2, "A3": op.A3, "A1t": op.A1t}[key](V)

    def append(self, Vn: np.ndarray):
        if Vn.shape[1] == 0:
            return
        for k in self.W:
            Wn = self._apply(k, Vn)
            P = self.P[k]
            top = np.hstack([P, self.V.T @ Wn])
            bot = np.hstack([Vn.T @ self.W[k], Vn.T @ Wn])
            self.P[k] = np.vstack([top, bot])
            self.W[k] = np.column_stack([self.W[k], Wn])
        self.F1r = np.vstack([self.F1r, Vn.T @ self.op.F1])
        self.V = np.column_stack([self.V, Vn])

    def rotate(self, U: np.ndarray):
        """Replace the basis by ``V @ U`` (orthonormal ``U``)."""
        self.V = self.V @ U
        for k in self.W:
            self.W[k] = self.W[k] @ U
            self.P[k] = self.V.T @ self.W[k]
        self.F1r = self.V.T @ self.op.F1

    def projection(self) -> Projection:
        return Projection(
            A1=self.P["A1"], A2=self.P["A2"], A3=self.P["A3"], F1=self.F1r,
            A1t=self.P.get("A1t"),
        )

    def projections_from_scratch(self):
        return {k: self.V.T @ self._apply(k, self.V) for k in self.W}

    @property
    def nbytes(self) -> int:
        return 8 * (self.V.size + sum(w.size for w in self.W.values()) + self.directions.size)


class ShiftedSolver:
    """Cached sparse factorizations for the shifted systems of each recipe."""

    def __init__(self, op: SylvesterOperator):
        self.op = op
        self.cache: OrderedDict = OrderedDict()
        self.B3 = None
        if op.case is CaseTag.BOUNDARY_CONTROL or op.alpha3:
            self.B3 = (op.B + op.alpha3 * op.K).tocsr()

    def _matrix(self, kind, s):
        op = self.op
        if kind == "A1":
            return op.K + s * op.M, not op.split
        if kind == "A1t":
            return op.Kt + s * op.M, False
        if kind == "A1+sA3":
            return op.K + s * self.B3, True
        if kind == "A3+sA1":
            return self.B3 + s * op.K, True
        raise KeyError(kind)

    def factor(self, kind, s):
        key = (kind, float(s))
        if key in self.cache:
            self.cache.move_to_end(key)
            return self.cache[key]
        A, sym = self._matrix(kind, s)
        f = sparse_factorize(A, symmetric=sym)
        self.cache[key] = f
        if len(self.cache) > FACTOR_CACHE:
            self.cache.popitem(last=False)
        return f

    def solve(self, kind, s, V):
        """``(coefficient)^-1 V`` for the given kind; diagonal kinds need no factorization."""
        op = self.op
        if kind == "A2":
            d = op.a2 + op.alpha2 + s
            return V / d[:, None]
        rhs = op.M @ V
        return self.factor(kind, s).solve(rhs)

    @property
    def nbytes(self) -> int:
        return sum(f.nbytes for f in self.cache.values())


def _recipe_directions(recipe: CaseTag):
    """(kind of first solve, kind of second solve or None)."""
    return {
        CaseTag.FULL_OBSERVATION: ("A1", None),
        CaseTag.PARTIAL_OBSERVATION: ("A1", "A2"),
        CaseTag.BOUNDARY_CONTROL: ("A1+sA3", "A3+sA1"),
        CaseTag.NONSYMMETRIC: ("A1", "A1t"),
    }[recipe]


class RationalKrylovSolver:
    def __init__(self, op: SylvesterOperator, cfg: SolverConfig | None = None, callback=None):
        self.op = op
        self.cfg = (cfg or SolverConfig()).validate()
        self.recipe = self.cfg.recipe if self.cfg.recipe is not None else op.case
        if self.recipe is CaseTag.NONSYMMETRIC and not op.split:
            raise ValueError("nonsymmetric recipe needs an operator built for case iv")
        if self.recipe is CaseTag.BOUNDARY_CONTROL and op.alpha3 == 0.0:
            raise ValueError("boundary-control recipe needs alpha3 > 0")
        self.continuation = self.cfg.continuation
        if self.continuation == "auto":
            single = _recipe_directions(self.recipe)[1] is None
            self.continuation = "latest" if single else "residual"
        self.callback = callback
        self.shifted = ShiftedSolver(op)
        self.lam_max = op.alpha2 if op.alpha2 > 0 else compute_alpha2(op, seed=self.cfg.shift_seed)
        self.pencil_lo = None
        if self.recipe is CaseTag.BOUNDARY_CONTROL:
            self.pencil_lo = self._pencil_lower_bound()
        self.state: KrylovState | None = None
        self.tracker: ResidualTracker | None = None

    def _pencil_lower_bound(self, steps: int = 20) -> float:
        # smallest eigenvalue of (A1, A3 + alpha3 A1) = 1 / largest of K^-1 B3
        B3 = self.shifted.B3
        f = self.shifted.factor("A1+sA3", 0.0)
        x = np.random.default_rng(self.cfg.shift_seed).standard_normal(self.op.n)
        x /= np.linalg.norm(x)
        mu = 0.0
        for _ in range(steps):
            y = f.solve(B3 @ x)
            mu = float(np.linalg.norm(y))
            if mu == 0.0:
                break
            x = y / mu
        return 1.0 / mu if mu > 0 else None

    # ------------------------------------------------------------------
    def initialize(self) -> KrylovState:
        op = self.op
        state = KrylovState(op, self.recipe)
        self.tracker = ResidualTracker(op)
        V0 = orthonormalize(op.F1)
        state.append(V0)
        state.directions = V0
        self.tracker.append(V0)
        self.state = state
        return state

    def next_shifts(self):
        st, op = self.state, self.op
        kind1, kind2 = _recipe_directions(self.recipe)
        P = st.P
        n_c = self.cfg.n_candidates
        if kind1 == "A1":
            s1 = adaptive_shift(ritz_values(P["A1"]), st.shifts1, hi=self.lam_max, n_candidates=n_c)
        else:
            # (A3a + s A1)^-1 is a multiple of (A1 + A3a/s)^-1, so both solves
            # are poles of one pencil; pick two distinct ones per step
            A3a = P["A3"] + op.alpha3 * P["A1"]
            theta = ritz_values(P["A1"], A3a)
            used = list(st.shifts1) + [1.0 / s for s in st.shifts2]
            hi = 1.0 / op.alpha3
            s1 = adaptive_shift(theta, used, lo=self.pencil_lo, hi=hi, n_candidates=n_c)
            pole = adaptive_shift(theta, used + [s1], lo=self.pencil_lo, hi=hi, n_candidates=n_c)
            return s1, 1.0 / pole
        s2 = None
        if kind2 == "A2":
            d = op.a2 + op.alpha2
            theta = ritz_values(P["A2"] + op.alpha2 * np.eye(st.p))
            s2 = adaptive_shift(theta, st.shifts2, lo=d.min(), hi=d.max(), n_candidates=n_c)
        elif kind2 == "A1t":
            s2 = adaptive_shift(ritz_values(P["A1t"]), st.shifts2, hi=self.lam_max, n_candidates=n_c)
        return s1, s2

    def expand_basis(self, s1, s2) -> int:
        """Add the shifted-inverse directions; return the number of new vectors."""
        st = self.state
        kind1, kind2 = _recipe_directions(self.recipe)
        if self.continuation == "residual":
            st.directions = self.residual_direction()
        v = st.directions
        cands = [self.shifted.solve(kind1, s1, v)]
        st.shifts1.append(s1)
        if kind2 is not None:
            cands.append(self.shifted.solve(kind2, s2, v))
            st.shifts2.append(s2)
        added = []
        basis = st.V
        for W in cands:
            Vn = orthonormalize(W, basis)
            if Vn.shape[1]:
                added.append(Vn)
                basis = np.column_stack([basis, Vn])
        if not added:
            return 0
        new = np.column_stack(added)
        st.append(new)
        self.tracker.append(new)
        st.directions = new[:, -v.shape[1]:]
        return new.shape[1]

    def residual_direction(self) -> np.ndarray:
        """Dominant left singular vector of the larger residual at the current ``Z``.

        With two solve kinds the new residual is no longer carried by the
        last basis vector alone, so the next step starts from the residual.
        """
        tr = self.tracker
        best, vec = -1.0, None
        for f, Rr in zip((tr.f1, tr.f2), tr.right_factors(self.state.Z)):
            if f.q == 0:
                continue
            a, sv, _ = np.linalg.svd(f.R @ Rr, full_matrices=False)
            if sv.size and sv[0] > best:
                best, vec = sv[0], f.Q @ a[:, :1]
        return vec if vec is not None else self.state.directions

    def solve_reduced(self) -> np.ndarray:
        st = self.state
        try:
            Z = solve_reduced(st.projection(), self.op.Y2, self.op.tau, self.op.beta)
        except SingularMatrixError as exc:
            raise ReducedSystemError(f"singular reduced system at p={st.p}: {exc}") from exc
        st.Z = Z
        return Z

    def truncate_basis(self):
        st = self.state
        U, s, _ = dense_svd(st.Z)
        keep = truncation_rank(s, self.cfg.threshold, self.op.n_T)
        if keep >= st.p:
            return False
        Uk = U[:, :keep]
        st.rotate(Uk)
        self.tracker.rotate(Uk)
        st.Z = Uk.T @ st.Z
        return True

    def memory_bytes(self) -> int:
        st = self.state
        return (st.nbytes + reduced_nbytes(st.p, self.op.n_T) + self.tracker.nbytes
                + self.shifted.nbytes)

    # ------------------------------------------------------------------
    def run(self) -> Solution:
        op, cfg = self.op, self.cfg
        t0 = time.perf_counter()
        report = SolveReport(case=self.recipe.value, alpha2=op.alpha2, alpha3=op.alpha3)
        if not np.any(op.F1) or not np.any(op.Y2):
            report.converged = True
            report.norms = ResidualNorms(0.0, 0.0, 0.0)
            report.message = "zero right-hand side"
            report.wall_time = time.perf_counter() - t0
            return Solution(np.zeros((op.n, 0)), np.zeros((0, 2 * op.n_T)), report)

        st = self.initialize()
        peak = 0
        stalled = 0
        last_worst = np.inf
        while True:
            Z = self.solve_reduced()
            norms = self.tracker.residual_norms(Z)
            report.iterations += 1
            report.history.append(IterationRecord(
                report.iterations, st.p, norms.r1, norms.r2, norms.rho3, time.perf_counter() - t0))
            report.norms = norms
            peak = max(peak, self.memory_bytes())
            if cfg.check_invariants:
                self._check_invariants()
            if self.callback is not None:
                self.callback(self, Z, norms)
            log.debug("it=%d p=%d r1=%.3e r2=%.3e rho3=%.3e", report.iterations, st.p,
                      norms.r1, norms.r2, norms.rho3)
            if stopping_check(norms, cfg.tol):
                report.converged = True
                report.message = "converged"
                break
            if report.iterations > cfg.max_iters:
                report.message = f"maximum iterations ({cfg.max_iters}) reached"
                break
            if cfg.truncation == "threshold" and report.iterations % cfg.truncate_every == 0:
                self.truncate_basis()
            s1, s2 = self.next_shifts()
            added = self.expand_basis(s1, s2)
            if added == 0 and norms.worst > (1.0 - STAGNATION_DECREASE) * last_worst:
                stalled += 1
            else:
                stalled = 0
            last_worst = min(last_worst, norms.worst)
            if stalled >= STAGNATION_STEPS:
                report.message = (
                    f"stagnation: no new directions for {stalled} iterations at p={st.p}, "
                    f"residual {norms.worst:.3e} > tol {cfg.tol:.1e}"
                )
                self._finish(report, peak, t0)
                raise StagnationError(report.message, Solution(st.V, st.Z, report))
        self._finish(report, peak, t0)
        return Solution(st.V, st.Z, report)

    def _finish(self, report, peak, t0):
        st = self.state
        report.p = st.p
        report.rank = numerical_rank(st.Z)
        report.memory_bytes = peak
        report.wall_time = time.perf_counter() - t0

    def _check_invariants(self):
        st = self.state
        G = st.V.T @ st.V
        err = np.abs(G - np.eye(st.p)).max() if st.p else 0.0
        if err > 1e-10:
            raise AssertionError(f"basis lost orthonormality: {err:.2e}")
        for k, P in st.projections_from_scratch().items():
            scale = max(np.linalg.norm(P), 1e-300)
            if np.linalg.norm(P - st.P[k]) > 1e-12 * scale * max(1, st.p):
                raise AssertionError(f"incremental projection {k} drifted")


def truncation_rank(s: np.ndarray, threshold: float, cap: int) -> int:
    if s.size == 0 or s[0] == 0.0:
        return 1
    keep = int(np.count_nonzero(s >= threshold * s[0]))
    return max(1, min(keep, cap))


def numerical_rank(Z: np.ndarray, tol: float = RANK_TOL) -> int:
    if Z.size == 0:
        return 0
    s = dense_svd(Z)[1]
    if s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s >= tol * s[0]))


def solve(op: SylvesterOperator, cfg: SolverConfig | None = None, callback=None) -> Solution:
    """Run the rational Krylov Galerkin iteration on ``op``."""
    return RationalKrylovSolver(op, cfg, callback).run()


@dataclass
class LowRankFactor:
    """``left @ right`` with ``left`` tall; dense only on request."""

    left: np.ndarray
    right: np.ndarray

    def dense(self) -> np.ndarray:
        return self.left @ self.right

    def frobenius_norm(self) -> float:
        G = (self.left.T @ self.left) * (self.right @ self.right.T)
        return float(np.sqrt(max(G.sum(), 0.0)))


def recover_solution(V, Z, op: SylvesterOperator):
    """Factored state, adjoint and control: ``U = (1/beta) Mb^-1 N^T Lam``."""
    nT = op.n_T
    ZY, ZL = Z[:, :nT], Z[:, nT:]
    mbinv = 1.0 / op.Mb.diagonal()
    UL = (mbinv[:, None] * (op.N.T @ V)) / op.beta if V.shape[1] else np.zeros((op.N.shape[1], 0))
    return LowRankFactor(V, ZY), LowRankFactor(V, ZL), LowRankFactor(np.asarray(UL), ZL)
