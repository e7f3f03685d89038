"""Adaptive pole selection for the rational Krylov iteration.

A shift ``s`` means a solve with ``A + s I``, i.e. a pole at ``-s``. Given
Ritz values ``theta_j`` (positive real part) and the shifts already used, the
next shift maximizes ``prod |t - s_j| / prod |t + theta_j|`` over a
logarithmic grid spanning the current spectral interval.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

N_CANDIDATES = 200
FLOOR = 1e-8


def spectral_interval(ritz, lo=None, hi=None):
    re = np.real(np.asarray(ritz, dtype=complex))
    re = re[np.isfinite(re)]
    vals = list(re)
    if hi is not None:
        vals.append(hi)
    if not vals:
        return None
    b = max(vals)
    if b <= 0:
        return None
    a_cands = [v for v in re if v > 0]
    if lo is not None:
        a_cands.append(lo)
    a = min(a_cands) if a_cands else b
    a = max(a, FLOOR * b)
    return a, b


def adaptive_shift(ritz, used, lo=None, hi=None, n_candidates: int = N_CANDIDATES) -> float:
    """Next shift for one direction; falls back to the interval midpoint."""
    interval = spectral_interval(ritz, lo, hi)
    if interval is None:
        return 1.0
    a, b = interval
    if b <= a * (1.0 + 1e-12):
        return 0.5 * (a + b)
    t = np.geomspace(a, b, n_candidates)
    theta = np.asarray(ritz, dtype=complex)
    theta = theta[np.isfinite(theta)]
    with np.errstate(divide="ignore"):
        logf = -np.log(np.abs(t[:, None] + theta[None, :])).sum(axis=1)
        if len(used):
            logf += np.log(np.abs(t[:, None] - np.asarray(used)[None, :])).sum(axis=1)
    finite = np.isfinite(logf)
    if not finite.any() or np.ptp(logf[finite]) < 1e-14 * max(1.0, np.abs(logf[finite]).max()):
        return 0.5 * (a + b)
    logf[~finite] = -np.inf
    return float(t[int(np.argmax(logf))])


def ritz_values(A: np.ndarray, B: np.ndarray | None = None) -> np.ndarray:
    """Eigenvalues of ``A`` or of the pencil ``(A, B)``; infinite ones dropped."""
    if A.size == 0:
        return np.zeros(0)
    if B is None:
        w = scipy.linalg.eigvals(A, check_finite=False)
    else:
        w = scipy.linalg.eigvals(A, B, check_finite=False)
    return w[np.isfinite(w)]
