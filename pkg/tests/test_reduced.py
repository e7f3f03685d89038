import numpy as np
import pytest
import scipy.sparse.linalg as spla
from hypothesis import given, settings
from hypothesis import strategies as st

from kktsylv.linalg import SingularMatrixError
from kktsylv.reduced import (
    Projection,
    apply_reduced,
    reduced_kronecker_matrix,
    reduced_nbytes,
    reduced_rhs,
    solve_reduced,
)
from kktsylv.shifts import adaptive_shift, ritz_values, spectral_interval


def random_projection(rng, p, r=1, split=False):
    def spd():
        B = rng.standard_normal((p, p))
        return B @ B.T + p * np.eye(p)

    def psd():
        B = rng.standard_normal((p, max(1, p // 2)))
        return B @ B.T

    A1 = spd()
    A1t = A1.T + 0.3 * rng.standard_normal((p, p)) if split else None
    return Projection(A1=A1, A2=psd(), A3=psd(), F1=rng.standard_normal((p, r)), A1t=A1t)


class TestSolveReduced:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.booleans(), st.integers(0, 2**31 - 1))
    def test_matches_kronecker_solve(self, p, nT, split, seed):
        r = np.random.default_rng(seed)
        proj = random_projection(r, p, r=2, split=split)
        Y2 = r.standard_normal((nT, 2))
        tau, beta = float(r.uniform(0.01, 1)), float(10 ** r.uniform(-4, 0))
        Z = solve_reduced(proj, Y2, tau, beta)
        S = reduced_kronecker_matrix(proj, nT, tau, beta)
        z = spla.spsolve(S.tocsc(), reduced_rhs(proj, Y2))
        np.testing.assert_allclose(Z.reshape(-1, order="F"), z, rtol=1e-8, atol=1e-10 * np.abs(z).max())
        res = apply_reduced(proj, Z, Y2, tau, beta)
        assert np.linalg.norm(res) <= 1e-9 * max(1.0, np.linalg.norm(proj.F1 @ Y2.T))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 5), st.booleans(), st.integers(0, 2**31 - 1))
    def test_vec_consistency(self, p, nT, split, seed):
        r = np.random.default_rng(seed)
        proj = random_projection(r, p, split=split)
        Y2 = r.standard_normal((nT, 1))
        tau, beta = 0.1, 0.01
        Z = r.standard_normal((p, 2 * nT))
        S = reduced_kronecker_matrix(proj, nT, tau, beta)
        lhs = S @ Z.reshape(-1, order="F") - reduced_rhs(proj, Y2)
        rhs = apply_reduced(proj, Z, Y2, tau, beta).reshape(-1, order="F")
        assert np.linalg.norm(lhs - rhs) <= 1e-13 * max(np.linalg.norm(lhs), 1.0) * np.abs(S).max()

    def test_transforms_leave_system_unchanged(self, rng):
        proj = random_projection(rng, 4)
        S0 = reduced_kronecker_matrix(proj, 3, 0.2, 0.05)
        S1 = reduced_kronecker_matrix(proj, 3, 0.2, 0.05, alpha2=7.0, alpha3=0.4)
        assert abs(S0 - S1).max() <= 1e-12 * abs(S0).max()

    def test_scalar_closed_form(self):
        a1, a2, a3, f, y2 = 2.0, 1.0, 1.0, 0.5, 3.0
        tau, beta = 0.25, 0.1
        proj = Projection(np.array([[a1]]), np.array([[a2]]), np.array([[a3]]), np.array([[f]]))
        Z = solve_reduced(proj, np.array([[y2]]), tau, beta)
        A = np.array([[a1 + 1 / tau, -a3 / beta], [a2, a1 + 1 / tau]])
        expected = np.linalg.solve(A, [0.0, f * y2])
        np.testing.assert_allclose(Z.ravel(), expected, rtol=1e-14)

    def test_zero_target(self, rng):
        proj = random_projection(rng, 3)
        proj.F1[:] = 0
        assert not np.any(solve_reduced(proj, np.ones((4, 1)), 0.1, 0.1))

    def test_empty_basis(self):
        proj = Projection(np.zeros((0, 0)), np.zeros((0, 0)), np.zeros((0, 0)), np.zeros((0, 1)))
        assert solve_reduced(proj, np.ones((3, 1)), 0.1, 1.0).shape == (0, 6)

    def test_singular(self):
        # A1 = -I/tau with A2 = A3 = 0 makes the first diagonal block zero
        p, tau = 2, 0.5
        proj = Projection(-np.eye(p) / tau, np.zeros((p, p)), np.zeros((p, p)), np.ones((p, 1)))
        with pytest.raises(SingularMatrixError):
            solve_reduced(proj, np.ones((2, 1)), tau, 1.0)

    def test_nbytes(self):
        assert reduced_nbytes(2, 10) == 8 * 10 * (16 + 8)


class TestShifts:
    def test_single_ritz_value_gives_endpoint(self):
        s = adaptive_shift([3.0], [], hi=50.0)
        assert s == pytest.approx(3.0)

    def test_equal_ritz_values_midpoint(self):
        assert adaptive_shift([2.0, 2.0, 2.0], [1.0]) == pytest.approx(2.0)
        assert adaptive_shift([2.0, 2.0], [], lo=1.0, hi=1.0 + 1e-14) == pytest.approx(1.0, rel=1e-12)

    def test_flat_objective_midpoint(self):
        # no Ritz values and no used shifts: the candidate function is constant
        assert adaptive_shift([], [], lo=1.0, hi=3.0) == pytest.approx(2.0)

    def test_no_interval(self):
        assert adaptive_shift([], []) == 1.0
        assert spectral_interval([-1.0, -2.0]) is None

    def test_interval_floor(self):
        a, b = spectral_interval([1e-12, 100.0])
        assert b == 100.0 and a == pytest.approx(1e-6)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2**31 - 1))
    def test_positive_for_spd(self, p, seed):
        r = np.random.default_rng(seed)
        B = r.standard_normal((p, p))
        A = B @ B.T + 1e-3 * np.eye(p)
        theta = ritz_values(A)
        used = []
        for _ in range(4):
            s = adaptive_shift(theta, used, hi=float(np.abs(theta).max()) * 2)
            assert s > 0
            a, b = spectral_interval(theta, hi=float(np.abs(theta).max()) * 2)
            assert a * (1 - 1e-12) <= s <= b * (1 + 1e-12)
            used.append(s)

    def test_avoids_used_shifts(self):
        theta = np.geomspace(1, 1000, 10)
        s1 = adaptive_shift(theta, [])
        s2 = adaptive_shift(theta, [s1])
        assert s2 != s1

    def test_ritz_values(self):
        np.testing.assert_allclose(np.sort(ritz_values(np.diag([3.0, 1.0])).real), [1, 3])
        assert ritz_values(np.zeros((0, 0))).size == 0
        # singular B gives one infinite eigenvalue, which is dropped
        w = ritz_values(np.eye(2), np.diag([1.0, 0.0]))
        np.testing.assert_allclose(w.real, [1.0])
