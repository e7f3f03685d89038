import numpy as np
import pytest

from kktsylv.discretize import (
    DesiredState,
    apply_observation_mask,
    assemble_convection_diffusion,
    assemble_heat,
    build_grid,
    make_desired_state,
    restrict_control_to_boundary,
    unobserved_nodes,
)
from kktsylv.problem import CaseTag, TimeGrid, build_operator

CASES = ("i", "ii", "iii", "iv")


def make_pde(case: str, level: int, n0: int | None = None, eps: float = 0.1):
    """Discretized PDE for one of the four structural cases."""
    case = CaseTag.parse(case)
    if case is CaseTag.NONSYMMETRIC:
        return assemble_convection_diffusion(build_grid(level, "symmetric"), eps)
    grid = build_grid(level)
    pde = assemble_heat(grid)
    if case is CaseTag.PARTIAL_OBSERVATION:
        count = n0 if n0 is not None else max(1, grid.n // 10)
        pde = apply_observation_mask(pde, unobserved_nodes(grid, count))
    elif case is CaseTag.BOUNDARY_CONTROL:
        pde = restrict_control_to_boundary(pde)
    return pde


def make_operator(case="i", level=3, n_T=10, beta=1e-4, kind="constant_rank1",
                  transforms=True, yhat=None, **kw):
    pde = make_pde(case, level, **kw)
    if yhat is None:
        yhat = make_desired_state(kind, pde.grid, n_T)
    return build_operator(pde, TimeGrid(1.0, n_T), beta, yhat, transforms=transforms)


def random_operator(rng: np.random.Generator, case: str, transforms=True):
    """Small random instance (n = 25, n_T <= 4) with a random low-rank target."""
    pde = make_pde(case, 2, n0=int(rng.integers(1, 10)), eps=float(rng.uniform(0.05, 1.0)))
    n_T = int(rng.integers(2, 5))
    r = int(rng.integers(1, n_T))
    yhat = DesiredState(rng.standard_normal((pde.n, r)), rng.standard_normal((n_T, r)))
    beta = float(10 ** rng.uniform(-4, 0))
    T = float(rng.uniform(0.5, 2.0))
    return build_operator(pde, TimeGrid(T, n_T), beta, yhat, transforms=transforms)


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)
