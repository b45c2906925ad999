"""
Backward-Euler time stepping for ∂ₜy + Δ²y + Σ p_β ∂^β y = R f with y = Δy = 0 on ∂Ω.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import Grid, build_grid
from .operators import CoefficientSet, operators_for, quadrature_weights

logger = logging.getLogger(__name__)

CG_RTOL = 1e-10


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SourceModel:
    """Source R(x,t) f(x); ``R`` has shape (Nt+1, *grid.shape)."""

    R: np.ndarray
    f: np.ndarray
    r0: float

    def check_positivity(self, grid: Grid, theta: float) -> None:
        """|R(x, θ)| ≥ r0 at every node of the closed domain."""
        m = grid.time_index(theta)
        bad = np.abs(self.R[m]) < self.r0
        if bad.any():
            nodes = np.argwhere(bad).tolist()
            raise ValueError(f"|R(x, theta)| < r0 = {self.r0} at nodes {nodes}")

    @classmethod
    def constant_in_time(cls, grid: Grid, R_space, f: np.ndarray, r0: Optional[float] = None) -> "SourceModel":
        Rs = np.broadcast_to(np.asarray(R_space, dtype=float), grid.shape)
        R = np.broadcast_to(Rs, (grid.Nt + 1,) + grid.shape).copy()
        if r0 is None:
            r0 = float(np.min(np.abs(Rs)))
        return cls(R, np.asarray(f, dtype=float), float(r0))

    def with_f(self, f: np.ndarray) -> "SourceModel":
        return SourceModel(self.R, np.asarray(f, dtype=float), self.r0)


@dataclass
class SpaceTimeField:
    grid: Grid
    values: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    def at_time(self, t: float) -> np.ndarray:
        return self.values[self.grid.time_index(t)]

    def time_derivative(self) -> np.ndarray:
        return np.gradient(self.values, self.grid.dt, axis=0, edge_order=2)

    def navier_trace_residual(self) -> float:
        """max over levels of |y| and |Δy| on ∂Ω (Δy from the odd-reflection ghost)."""
        bnd = self.grid.boundary_mask()
        worst = float(np.max(np.abs(self.values[:, bnd])))
        return max(worst, _navier_laplacian_trace(self.values, self.grid))


def _navier_laplacian_trace(values: np.ndarray, grid: Grid) -> float:
    """Δy at boundary nodes with ghost y_{-1} = −y_1; zero unless y is nonzero on ∂Ω."""
    worst = 0.0
    for a in range(grid.dim):
        for edge, inner in ((0, 1), (-1, -2)):
            idx_b = [slice(None)] * (grid.dim + 1)
            idx_i = [slice(None)] * (grid.dim + 1)
            idx_b[a + 1] = edge
            idx_i[a + 1] = inner
            yb = values[tuple(idx_b)]
            yi = values[tuple(idx_i)]
            normal = (-yi - 2 * yb + yi) / grid.spacing[a] ** 2
            worst = max(worst, float(np.max(np.abs(normal))))
    return worst


class ForwardStepper:
    """Factorises I + dt K once on the interior unknowns and reuses it for every step."""

    def __init__(self, grid: Grid, coeffs: CoefficientSet, method: str = "direct"):
        if method not in ("direct", "cg"):
            raise ValueError(f"unknown linear solver {method!r}")
        self.grid = grid
        self.method = method
        ops = operators_for(grid)
        K = ops.biharmonic_navier().matrix + ops.lower_order(coeffs)
        self.interior = np.flatnonzero(grid.interior_mask().ravel())
        Ki = sp.csc_matrix(K[self.interior][:, self.interior])
        self.system = sp.csc_matrix(sp.identity(len(self.interior)) + grid.dt * Ki)
        if method == "direct":
            self._lu = spla.splu(self.system)
        else:
            diag = self.system.diagonal()
            self._precond = spla.LinearOperator(self.system.shape, matvec=lambda v: v / diag)

    def solve(self, rhs: np.ndarray, transpose: bool = False) -> np.ndarray:
        if self.method == "direct":
            return self._lu.solve(rhs, trans="T" if transpose else "N")
        mat = self.system.T if transpose else self.system
        sol, info = spla.cg(mat, rhs, rtol=CG_RTOL, atol=0.0, M=self._precond, maxiter=20 * len(rhs))
        if info != 0:
            raise SolverError(f"CG did not converge (info={info}, iterations cap {20 * len(rhs)})")
        return sol

    def run(self, y_init: np.ndarray, forcing: Optional[Callable[[int], np.ndarray]] = None) -> np.ndarray:
        g = self.grid
        out = np.zeros((g.Nt + 1,) + g.shape)
        out[0] = y_init
        y = np.asarray(y_init, dtype=float).ravel()[self.interior]
        for m in range(1, g.Nt + 1):
            rhs = y.copy()
            if forcing is not None:
                rhs += g.dt * forcing(m).ravel()[self.interior]
            y = self.solve(rhs)
            out[m].ravel()[self.interior] = y
        return out


def solve_forward(
    grid: Grid,
    coeffs: CoefficientSet,
    source: Optional[SourceModel],
    y_init: Optional[np.ndarray] = None,
    method: str = "direct",
    stepper: Optional[ForwardStepper] = None,
) -> SpaceTimeField:
    """Backward-Euler solution on [0, T]; y_init must vanish on ∂Ω."""
    if y_init is None:
        y_init = np.zeros(grid.shape)
    y_init = np.asarray(y_init, dtype=float)
    if y_init.shape != grid.shape:
        raise ValueError(f"y_init shape {y_init.shape} does not match grid {grid.shape}")
    bnd = grid.boundary_mask()
    if np.max(np.abs(y_init[bnd]), initial=0.0) > 1e-12 * max(1.0, float(np.max(np.abs(y_init)))):
        raise ValueError("y_init does not vanish on the boundary")
    if stepper is None:
        stepper = ForwardStepper(grid, coeffs, method)
    forcing = None
    if source is not None:
        f = np.asarray(source.f, dtype=float)
        forcing = lambda m: source.R[m] * f  # noqa: E731
    return SpaceTimeField(grid, stepper.run(y_init, forcing))


def modal_solution(grid: Grid, k: int = 1, t_shift: float = 0.0) -> np.ndarray:
    """e^{−(kπ)⁴ (t − t_shift)} Π sin(kπ x̂_a), x̂ the coordinate rescaled to [0, 1] per axis."""
    lam = 0.0
    prof = np.ones(grid.shape)
    for a in range(grid.dim):
        lo, hi = grid.extents[a]
        L = hi - lo
        xs = (grid.coords(a) - lo) / L
        shape = [1] * grid.dim
        shape[a] = grid.nodes[a]
        prof = prof * np.sin(k * np.pi * xs).reshape(shape)
        lam += (k * np.pi / L) ** 2
    prof[grid.boundary_mask()] = 0.0
    decay = np.exp(-(lam**2) * (grid.times - t_shift))
    return decay.reshape((-1,) + (1,) * grid.dim) * prof


def l2_error(a: np.ndarray, b: np.ndarray, grid: Grid) -> float:
    w = quadrature_weights(grid)
    return float(np.sqrt(np.sum(w * (a - b) ** 2)))


@dataclass
class ConvergenceTable:
    kind: str
    steps: list
    errors: list

    @property
    def ratios(self) -> list:
        return [a / b for a, b in zip(self.errors, self.errors[1:])]

    @property
    def orders(self) -> list:
        return [float(np.log2(r)) for r in self.ratios]

    def rows(self) -> list[dict]:
        out = []
        for i, (st, err) in enumerate(zip(self.steps, self.errors)):
            out.append(
                {
                    "kind": self.kind,
                    "step": st,
                    "error": err,
                    "ratio": self.ratios[i - 1] if i else float("nan"),
                    "order": self.orders[i - 1] if i else float("nan"),
                }
            )
        return out


def _modal_error(grid: Grid, k: int) -> float:
    exact = modal_solution(grid, k)
    num = solve_forward(grid, CoefficientSet.zero(grid), None, exact[0])
    return l2_error(num.values[-1], exact[-1], grid) / l2_error(exact[-1], 0 * exact[-1], grid)


def manufactured_convergence(
    space_nodes: Sequence[int] = (21, 41, 81),
    space_Nt: int = 20000,
    time_nodes: int = 201,
    time_Nt: Sequence[int] = (10, 20, 40),
    T: float = 0.01,
    space_T: float = 0.002,
    k: int = 1,
) -> tuple[ConvergenceTable, ConvergenceTable]:
    """Observed orders for the modal solution e^{−(kπ)⁴t} sin(kπx) on (0, 1).

    The spatial study uses a short horizon and a time step fine enough that
    the O(Δt) error is negligible, and vice versa.
    """
    if len(space_nodes) < 3 or len(time_Nt) < 3:
        raise ValueError("need at least three grids per refinement study")
    space = ConvergenceTable("space", [], [])
    for n in space_nodes:
        g = build_grid(1, [(0.0, 1.0)], [n], space_T, space_Nt)
        space.steps.append(g.spacing[0])
        space.errors.append(_modal_error(g, k))
    time = ConvergenceTable("time", [], [])
    for nt in time_Nt:
        g = build_grid(1, [(0.0, 1.0)], [time_nodes], T, nt)
        time.steps.append(g.dt)
        time.errors.append(_modal_error(g, k))
    return space, time
