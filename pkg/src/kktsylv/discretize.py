"""Q1 finite elements on uniform square grids.

Nodes are numbered lexicographically, x fastest: node ``i + j*(m+1)`` sits at
``(x0 + i*h, x0 + j*h)``. Dirichlet nodes are kept in the system; their rows
and columns of ``K`` are cleared and the diagonal set to the lumped mass entry,
so ``n = (m+1)**2`` and ``M`` stays invertible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .linalg import as_csr, read_matrix_market

DOMAINS = {"unit": (0.0, 1.0), "symmetric": (-1.0, 1.0)}
MAX_LEVEL = 10

# reference-square data, local node order (0,0),(1,0),(1,1),(0,1)
_LOCAL = np.array([[0, 0], [1, 0], [1, 1], [0, 1]])
_GAUSS = 0.5 + np.array([-1.0, 1.0]) / (2.0 * np.sqrt(3.0))
_STIFF_REF = np.array(
    [[4, -1, -2, -1], [-1, 4, -1, -2], [-2, -1, 4, -1], [-1, -2, -1, 4]], dtype=float
) / 6.0


@dataclass(frozen=True)
class Grid:
    level: int
    domain: tuple[float, float]

    @property
    def m(self) -> int:
        return 2**self.level

    @property
    def side(self) -> int:
        return self.m + 1

    @property
    def n(self) -> int:
        return self.side**2

    @property
    def h(self) -> float:
        return (self.domain[1] - self.domain[0]) / self.m

    @property
    def coords(self) -> np.ndarray:
        t = np.linspace(self.domain[0], self.domain[1], self.side)
        X, Y = np.meshgrid(t, t, indexing="xy")
        return np.column_stack([X.ravel(), Y.ravel()])

    @property
    def boundary_nodes(self) -> np.ndarray:
        s = self.side
        i, j = np.meshgrid(np.arange(s), np.arange(s), indexing="xy")
        on = (i == 0) | (j == 0) | (i == s - 1) | (j == s - 1)
        return np.flatnonzero(on.ravel())

    @property
    def interior_nodes(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.n), self.boundary_nodes)

    @property
    def ring_nodes(self) -> np.ndarray:
        """Interior nodes that share a cell with the boundary."""
        s = self.side
        i, j = np.meshgrid(np.arange(s), np.arange(s), indexing="xy")
        interior = (i > 0) & (j > 0) & (i < s - 1) & (j < s - 1)
        near = (i == 1) | (j == 1) | (i == s - 2) | (j == s - 2)
        return np.flatnonzero((interior & near).ravel())

    def cells(self) -> np.ndarray:
        """``(m*m, 4)`` node indices of every cell in local order."""
        m, s = self.m, self.side
        a, b = np.meshgrid(np.arange(m), np.arange(m), indexing="xy")
        base = (a + b * s).ravel()
        return np.column_stack([base, base + 1, base + s + 1, base + s])


def build_grid(level: int, domain="unit", max_level: int = MAX_LEVEL) -> Grid:
    """Uniform grid with ``2**level`` cells per side on ``[0,1]^2`` or ``[-1,1]^2``."""
    if isinstance(domain, str):
        if domain not in DOMAINS:
            raise ValueError(f"unknown domain {domain!r}; expected one of {sorted(DOMAINS)}")
        domain = DOMAINS[domain]
    level = int(level)
    if level < 1:
        raise ValueError("grid level must be >= 1")
    if level > max_level:
        raise MemoryError(f"grid level {level} exceeds the configured cap {max_level}")
    return Grid(level, (float(domain[0]), float(domain[1])))


@dataclass
class DiscretizedPDE:
    grid: Grid
    M: sp.csr_matrix
    K: sp.csr_matrix
    M1: sp.csr_matrix
    N: sp.csr_matrix
    Mb: sp.csr_matrix
    symmetric_K: bool
    eps: float | None = None
    control_nodes: np.ndarray | None = None
    unobserved: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    # pieces of K before boundary conditions, kept for inspection
    K_diff: sp.csr_matrix | None = None
    K_conv: sp.csr_matrix | None = None

    @property
    def n(self) -> int:
        return self.M.shape[0]

    @property
    def n_b(self) -> int:
        return self.N.shape[1]


def _scatter(grid: Grid, local: np.ndarray) -> sp.csr_matrix:
    """Assemble per-cell 4x4 blocks ``local[c]`` (or one shared block) to global."""
    cells = grid.cells()
    nc = cells.shape[0]
    if local.ndim == 2:
        local = np.broadcast_to(local, (nc, 4, 4))
    rows = np.repeat(cells, 4, axis=1).ravel()
    cols = np.tile(cells, (1, 4)).ravel()
    A = sp.coo_matrix((local.reshape(-1), (rows, cols)), shape=(grid.n, grid.n))
    return as_csr(A)


def lumped_mass(grid: Grid) -> sp.csr_matrix:
    diag = np.zeros(grid.n)
    np.add.at(diag, grid.cells().ravel(), grid.h**2 / 4.0)
    return sp.diags(diag, format="csr")


def laplace_stiffness(grid: Grid) -> sp.csr_matrix:
    """Q1 stiffness of ``-Laplace`` without boundary conditions (h-independent in 2D)."""
    K = _scatter(grid, _STIFF_REF)
    return as_csr((K + K.T) * 0.5)


def _basis(xi: float, eta: float):
    phi = np.array([(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta])
    dxi = np.array([-(1 - eta), 1 - eta, eta, -eta])
    deta = np.array([-(1 - xi), -xi, xi, 1 - xi])
    return phi, dxi, deta


def recirculating_wind(x, y):
    return 2.0 * y * (1.0 - x**2), -2.0 * x * (1.0 - y**2)


def convection_matrices(grid: Grid, eps: float, wind=recirculating_wind):
    """Galerkin convection plus streamline-diffusion stabilization.

    The stabilization weight per cell uses the wind at the cell centre and the
    usual cell Peclet switch ``delta = h/(2|w|) (1 - 1/Pe)`` for ``Pe > 1``.
    """
    h = grid.h
    cells = grid.cells()
    origin = grid.coords[cells[:, 0]]
    cx, cy = origin[:, 0] + h / 2, origin[:, 1] + h / 2
    wx, wy = wind(cx, cy)
    wnorm = np.hypot(wx, wy)
    peclet = wnorm * h / (2.0 * eps)
    delta = np.zeros_like(wnorm)
    mask = peclet > 1.0
    delta[mask] = h / (2.0 * wnorm[mask]) * (1.0 - 1.0 / peclet[mask])

    conv = np.zeros((cells.shape[0], 4, 4))
    stab = np.zeros((cells.shape[0], 4, 4))
    w_q = 0.25 * h**2  # Gauss weights (1/2 * 1/2) times cell area
    for xi in _GAUSS:
        for eta in _GAUSS:
            phi, dxi, deta = _basis(xi, eta)
            qx, qy = origin[:, 0] + xi * h, origin[:, 1] + eta * h
            ux, uy = wind(qx, qy)
            # w . grad(phi_j) per cell, shape (cells, 4)
            wgrad = (np.outer(ux, dxi) + np.outer(uy, deta)) / h
            conv += w_q * phi[None, :, None] * wgrad[:, None, :]
            stab += w_q * delta[:, None, None] * wgrad[:, :, None] * wgrad[:, None, :]
    return _scatter(grid, conv), _scatter(grid, stab)


def _dirichlet(K: sp.csr_matrix, M: sp.csr_matrix, nodes: np.ndarray) -> sp.csr_matrix:
    keep = np.ones(K.shape[0])
    keep[nodes] = 0.0
    D = sp.diags(keep)
    bc = np.zeros(K.shape[0])
    bc[nodes] = M.diagonal()[nodes]
    return as_csr(D @ K @ D + sp.diags(bc))


def assemble_heat(grid: Grid) -> DiscretizedPDE:
    """Heat equation with distributed control and full observation."""
    M = lumped_mass(grid)
    K_raw = laplace_stiffness(grid)
    K = _dirichlet(K_raw, M, grid.boundary_nodes)
    K = as_csr((K + K.T) * 0.5)
    return DiscretizedPDE(
        grid=grid, M=M, K=K, M1=M.copy(), N=M.copy(), Mb=M.copy(),
        symmetric_K=True, K_diff=K_raw,
    )


def assemble_convection_diffusion(grid: Grid, eps: float, wind=recirculating_wind) -> DiscretizedPDE:
    if eps <= 0:
        raise ValueError("diffusion coefficient must be positive")
    M = lumped_mass(grid)
    K_diff = laplace_stiffness(grid)
    conv, stab = convection_matrices(grid, eps, wind)
    K_conv = as_csr(conv + stab)
    K = _dirichlet(as_csr(eps * K_diff + K_conv), M, grid.boundary_nodes)
    return DiscretizedPDE(
        grid=grid, M=M, K=K, M1=M.copy(), N=M.copy(), Mb=M.copy(),
        symmetric_K=False, eps=float(eps), K_diff=K_diff, K_conv=K_conv,
    )


def apply_observation_mask(pde: DiscretizedPDE, unobserved) -> DiscretizedPDE:
    """Zero the observation mass at ``unobserved`` nodes."""
    idx = np.unique(np.asarray(unobserved, dtype=int).reshape(-1))
    if idx.size and (idx.min() < 0 or idx.max() >= pde.n):
        raise IndexError("observation mask index out of range")
    d = pde.M.diagonal().copy()
    d[idx] = 0.0
    return replace(pde, M1=sp.diags(d, format="csr"), unobserved=idx)


def unobserved_nodes(grid: Grid, count: int) -> np.ndarray:
    """The ``count`` nodes closest to the lower-left corner (ties by index)."""
    if not 0 <= count <= grid.n:
        raise ValueError(f"unobserved node count must be in [0, {grid.n}]")
    xy = grid.coords - grid.domain[0]
    dist = np.hypot(xy[:, 0], xy[:, 1])
    order = np.lexsort((np.arange(grid.n), dist))
    return np.sort(order[:count])


def restrict_control_to_boundary(pde: DiscretizedPDE, nodes=None) -> DiscretizedPDE:
    """Control acts only on ``nodes`` (default: interior nodes touching the boundary).

    ``N`` keeps the columns of ``M`` at the control nodes and ``Mb`` is the
    matching diagonal block, so ``N`` is tall with full column rank.
    """
    nodes = pde.grid.ring_nodes if nodes is None else np.unique(np.asarray(nodes, dtype=int))
    if nodes.size == 0:
        raise ValueError("control node set is empty")
    N = as_csr(pde.M[:, nodes])
    Mb = sp.diags(pde.M.diagonal()[nodes], format="csr")
    return replace(pde, N=N, Mb=Mb, control_nodes=nodes)


@dataclass
class DesiredState:
    Y1: np.ndarray
    Y2: np.ndarray

    @property
    def r(self) -> int:
        return self.Y1.shape[1]

    def dense(self) -> np.ndarray:
        return self.Y1 @ self.Y2.T

    def frobenius_norm(self) -> float:
        G = (self.Y1.T @ self.Y1) * (self.Y2.T @ self.Y2)
        return float(np.sqrt(max(G.sum(), 0.0)))


def _validate_state(Y1, Y2, n, n_T) -> DesiredState:
    Y1 = np.asarray(Y1, dtype=float)
    Y2 = np.asarray(Y2, dtype=float)
    if Y1.ndim == 1:
        Y1 = Y1[:, None]
    if Y2.ndim == 1:
        Y2 = Y2[:, None]
    if Y1.shape[0] != n or Y2.shape[0] != n_T or Y1.shape[1] != Y2.shape[1]:
        raise ValueError(
            f"desired-state factors have shapes {Y1.shape}, {Y2.shape}; expected ({n}, r), ({n_T}, r)"
        )
    if Y1.shape[1] >= n_T:
        raise ValueError(f"desired-state rank {Y1.shape[1]} must be below n_T={n_T}")
    return DesiredState(Y1, Y2)


def centered_square(grid: Grid, area_fraction: float = 0.25) -> np.ndarray:
    a, b = grid.domain
    c, half = 0.5 * (a + b), 0.5 * np.sqrt(area_fraction) * (b - a)
    xy = grid.coords
    inside = (np.abs(xy[:, 0] - c) <= half + 1e-12) & (np.abs(xy[:, 1] - c) <= half + 1e-12)
    return inside.astype(float)


_BUMP_CENTRES = [(0.25, 0.3), (0.5, 0.3), (0.75, 0.3), (0.25, 0.7), (0.5, 0.7), (0.75, 0.7)]
_BUMP_WIDTH = 0.08


def make_desired_state(kind: str, grid: Grid, n_T: int, *, path_Y1=None, path_Y2=None,
                       area_fraction: float = 0.25) -> DesiredState:
    """Low-rank desired state ``Y1 @ Y2.T``.

    ``constant_rank1``: indicator of a centred square, constant in time.
    ``rank6_modes``: six Gaussian bumps in space times six cosine modes in time.
    ``from_file``: factors read from two MatrixMarket files.
    """
    if n_T < 1:
        raise ValueError("n_T must be >= 1")
    if kind == "constant_rank1":
        return _validate_state(centered_square(grid, area_fraction), np.ones(n_T), grid.n, n_T)
    if kind == "rank6_modes":
        a, b = grid.domain
        xy = (grid.coords - a) / (b - a)
        # bumps rather than eigenmodes, so the start space is not invariant
        Y1 = np.column_stack([
            np.exp(-((xy[:, 0] - cx) ** 2 + (xy[:, 1] - cy) ** 2) / (2 * _BUMP_WIDTH**2))
            for cx, cy in _BUMP_CENTRES
        ])
        t = np.arange(1, n_T + 1) / n_T
        Y2 = np.column_stack([np.cos(k * np.pi * t) for k in range(len(_BUMP_CENTRES))])
        return _validate_state(Y1, Y2, grid.n, n_T)
    if kind == "zero":
        return _validate_state(np.zeros(grid.n), np.ones(n_T), grid.n, n_T)
    if kind == "from_file":
        if path_Y1 is None or path_Y2 is None:
            raise ValueError("from_file desired state needs both factor paths")
        Y1 = read_matrix_market(path_Y1)
        Y2 = read_matrix_market(path_Y2)
        Y1 = Y1.toarray() if sp.issparse(Y1) else Y1
        Y2 = Y2.toarray() if sp.issparse(Y2) else Y2
        return _validate_state(Y1, Y2, grid.n, n_T)
    raise ValueError(f"unknown desired-state kind {kind!r}")
