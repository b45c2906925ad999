"""
Recovering the spatial factor f in ∂ₜy + Δ²y + Σ p_β ∂^β y = R(x,t) f(x), y(·,0) = 0,
from y on ω × (θ − t1, θ + t1) together with the snapshot y(·, θ).

f lives on the interior nodes: the Navier rows on ∂Ω never see the source.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .forward import ForwardStepper, SourceModel, solve_forward
from .geometry import Grid, SubdomainMasks
from .operators import CoefficientSet, navier_sobolev_factors, operators_for, quadrature_weights

logger = logging.getLogger(__name__)

CG_RTOL = 1e-12
H4_ORDER = 4


class InverseError(RuntimeError):
    pass


def default_window(T: float) -> tuple[float, float]:
    """θ = T/2, t1 = T/4."""
    return 0.5 * T, 0.25 * T


def _window_levels(grid: Grid, theta: float, t1: float) -> np.ndarray:
    if not (0.0 < theta - t1 and theta + t1 < grid.T):
        raise ValueError(f"need 0 < theta - t1 < theta + t1 < T, got theta={theta}, t1={t1}, T={grid.T}")
    t = grid.times
    tol = 1e-9 * grid.dt
    levels = np.flatnonzero((t >= theta - t1 - tol) & (t <= theta + t1 + tol))
    if levels.size < 3:
        raise ValueError("observation window holds fewer than three time levels")
    return levels


@dataclass
class ObservationData:
    y_omega: np.ndarray
    y_theta: np.ndarray
    theta: float
    t1: float
    noise_level: float = 0.0

    def scaled(self, c: float) -> "ObservationData":
        return ObservationData(c * self.y_omega, c * self.y_theta, self.theta, self.t1, self.noise_level)

    def __sub__(self, other: "ObservationData") -> "ObservationData":
        return ObservationData(self.y_omega - other.y_omega, self.y_theta - other.y_theta, self.theta, self.t1)


class ObservationOperator:
    """The linear map A: f ↦ (y|_{ω×window}, y(·,θ)) and its adjoint in the data inner product.

    The data inner product is H¹ in time on ω × window plus Σ_{|β|≤4} at θ;
    A* = W_f⁻¹ Aᵀ G with W_f the L² quadrature weights on the unknowns.
    """

    def __init__(
        self,
        grid: Grid,
        coeffs: CoefficientSet,
        R: np.ndarray,
        masks: SubdomainMasks,
        theta: Optional[float] = None,
        t1: Optional[float] = None,
    ):
        if theta is None or t1 is None:
            theta, t1 = default_window(grid.T)
        self.grid = grid
        self.theta = float(theta)
        self.t1 = float(t1)
        self.levels = _window_levels(grid, self.theta, self.t1)
        self.m_theta = grid.time_index(self.theta)
        if abs(grid.times[self.m_theta] - self.theta) > 1e-9 * grid.dt:
            raise ValueError(f"theta={theta} is not a time level")
        self.m_last = int(max(self.levels[-1], self.m_theta))
        R = np.asarray(R, dtype=float)
        if R.shape != (grid.Nt + 1,) + grid.shape:
            raise ValueError(f"R has shape {R.shape}, expected {(grid.Nt + 1,) + grid.shape}")
        self.stepper = ForwardStepper(grid, coeffs)
        self.interior = self.stepper.interior
        self.R = R.reshape(grid.Nt + 1, -1)[:, self.interior]
        self.omega_nodes = np.flatnonzero(masks.omega.ravel())
        # positions of ω nodes inside the interior unknown vector
        pos = -np.ones(grid.size, dtype=int)
        pos[self.interior] = np.arange(len(self.interior))
        if np.any(pos[self.omega_nodes] < 0):
            raise ValueError("omega must not contain boundary nodes")
        self.omega_pos = pos[self.omega_nodes]

        self.w_f = quadrature_weights(grid).ravel()[self.interior]
        self._gram_setup(masks)

    @property
    def n_unknowns(self) -> int:
        return len(self.interior)

    def _gram_setup(self, masks: SubdomainMasks) -> None:
        g = self.grid
        n_t = len(self.levels)
        wt = np.full(n_t, g.dt)
        wt[0] = wt[-1] = 0.5 * g.dt
        self.wt = wt
        # np.gradient with edge_order=2 as a matrix over the window levels
        self.Dt = sp.csr_matrix(np.gradient(np.eye(n_t), g.dt, axis=0, edge_order=2))
        self.wx_omega = quadrature_weights(g, masks.omega).ravel()[self.omega_nodes]
        # y(·,θ) satisfies the Navier conditions, so its H⁴ norm uses odd reflection at ∂Ω
        self.h4_factors = [sp.csr_matrix(D[:, self.interior]) for D in navier_sobolev_factors(g, H4_ORDER)]
        self.wx = quadrature_weights(g).ravel()

    def gram(self, obs: ObservationData) -> ObservationData:
        """G applied to a data pair, so that ⟨a, b⟩_data = Σ a · (G b)."""
        yo = obs.y_omega
        Wt = sp.diags(self.wt)
        first = (self.wt[:, None] * yo) * self.wx_omega[None, :]
        dyo = self.Dt @ yo
        second = (self.Dt.T @ (Wt @ dyo)) * self.wx_omega[None, :]
        a = obs.y_theta.ravel()[self.interior]
        yt = sum(D.T @ (self.wx * (D @ a)) for D in self.h4_factors)
        out_theta = np.zeros(self.grid.size)
        out_theta[self.interior] = yt
        return ObservationData(first + second, out_theta.reshape(self.grid.shape), self.theta, self.t1)

    def inner(self, a: ObservationData, b: ObservationData) -> float:
        Gb = self.gram(b)
        return float(np.sum(a.y_omega * Gb.y_omega) + np.sum(a.y_theta * Gb.y_theta))

    def data_norm(self, obs: ObservationData) -> float:
        return float(np.sqrt(max(self.inner(obs, obs), 0.0)))

    def split_norms(self, obs: ObservationData) -> tuple[float, float]:
        """(||y||_{H¹(window; L²(ω))}, ||y(·,θ)||_{H⁴(Ω)})."""
        zero_theta = ObservationData(obs.y_omega, np.zeros_like(obs.y_theta), self.theta, self.t1)
        zero_omega = ObservationData(np.zeros_like(obs.y_omega), obs.y_theta, self.theta, self.t1)
        return self.data_norm(zero_theta), self.data_norm(zero_omega)

    def observe(self, y: np.ndarray) -> ObservationData:
        """Restrict a full space-time field to the observation."""
        flat = np.asarray(y).reshape(y.shape[0], -1)
        return ObservationData(flat[self.levels][:, self.omega_nodes].copy(), np.asarray(y[self.m_theta]).copy(), self.theta, self.t1)

    def apply(self, f_int: np.ndarray) -> ObservationData:
        g = self.grid
        y = np.zeros(self.n_unknowns)
        y_omega = np.zeros((len(self.levels), len(self.omega_nodes)))
        y_theta = np.zeros(g.size)
        level_slot = {m: i for i, m in enumerate(self.levels)}
        for m in range(1, self.m_last + 1):
            y = self.stepper.solve(y + g.dt * self.R[m] * f_int)
            if m in level_slot:
                y_omega[level_slot[m]] = y[self.omega_pos]
            if m == self.m_theta:
                y_theta[self.interior] = y
        return ObservationData(y_omega, y_theta.reshape(g.shape), self.theta, self.t1)

    def apply_transpose(self, r: ObservationData) -> np.ndarray:
        """Aᵀ r by the backward recursion q^m = Sᵀ(O_mᵀ r_m + q^{m+1})."""
        g = self.grid
        q = np.zeros(self.n_unknowns)
        out = np.zeros(self.n_unknowns)
        level_slot = {m: i for i, m in enumerate(self.levels)}
        r_theta = r.y_theta.ravel()[self.interior]
        for m in range(self.m_last, 0, -1):
            src = q.copy()
            if m in level_slot:
                src[self.omega_pos] += r.y_omega[level_slot[m]]
            if m == self.m_theta:
                src += r_theta
            q = self.stepper.solve(src, transpose=True)
            out += g.dt * self.R[m] * q
        return out

    def adjoint(self, r: ObservationData) -> np.ndarray:
        """A* r with respect to the data and L² inner products."""
        return self.apply_transpose(self.gram(r)) / self.w_f

    def embed(self, f_int: np.ndarray) -> np.ndarray:
        out = np.zeros(self.grid.size)
        out[self.interior] = f_int
        return out.reshape(self.grid.shape)

    def restrict(self, f: np.ndarray) -> np.ndarray:
        return np.asarray(f, dtype=float).ravel()[self.interior]


@dataclass
class TikhonovResult:
    f: np.ndarray
    reg: float
    iterations: int
    residual: float


def tikhonov_reconstruct(
    op: ObservationOperator,
    obs: ObservationData,
    reg: float,
    rtol: float = CG_RTOL,
    maxiter: Optional[int] = None,
) -> TikhonovResult:
    """argmin ||Af − obs||²_data + reg ||f||²_{L²} by CG on the normal equations."""
    if reg < 0:
        raise ValueError("reg must be non-negative")
    if reg == 0 and obs.noise_level > 0:
        warnings.warn("reg = 0 with noisy data: the normal equations are unregularised", RuntimeWarning, stacklevel=2)
    sq = np.sqrt(op.w_f)
    n = op.n_unknowns
    count = {"it": 0}

    def matvec(u):
        f = u / sq
        return sq * op.adjoint(op.apply(f)) + reg * u

    def cb(_):
        count["it"] += 1

    rhs = sq * op.adjoint(obs)
    if not np.any(rhs):
        return TikhonovResult(op.embed(np.zeros(n)), reg, 0, 0.0)
    lin = spla.LinearOperator((n, n), matvec=matvec, dtype=float)
    maxiter = maxiter or 20 * n
    u, info = spla.cg(lin, rhs, rtol=rtol, atol=0.0, maxiter=maxiter, callback=cb)
    res = float(np.linalg.norm(matvec(u) - rhs) / np.linalg.norm(rhs))
    if info != 0:
        raise InverseError(f"CG stagnated after {count['it']} iterations (relative residual {res:.3e}, reg={reg:g})")
    return TikhonovResult(op.embed(u / sq), reg, count["it"], res)


def direct_formula_reconstruct(
    y_full: np.ndarray,
    grid: Grid,
    coeffs: CoefficientSet,
    source: SourceModel,
    theta: float,
) -> np.ndarray:
    """f = (∂ₜy(·,θ) + Δ²a + Σ p_β ∂^β a) / R(·,θ) with a = y(·,θ) and a central time difference."""
    source.check_positivity(grid, theta)
    m = grid.time_index(theta)
    if not 0 < m < grid.Nt:
        raise ValueError("theta must have a time level on each side")
    y = np.asarray(y_full, dtype=float)
    a = y[m].ravel()
    z = (y[m + 1] - y[m - 1]).ravel() / (2.0 * grid.dt)
    ops = operators_for(grid)
    K = ops.biharmonic_navier().matrix + ops.lower_order(coeffs)
    num = z + K @ a
    interior = grid.interior_mask().ravel()
    out = np.zeros(grid.size)
    out[interior] = num[interior] / source.R[m].ravel()[interior]
    return out.reshape(grid.shape)


def relative_l2(a: np.ndarray, b: np.ndarray, grid: Grid) -> float:
    """||a − b|| / ||b|| over the interior nodes."""
    w = quadrature_weights(grid, grid.interior_mask())
    return float(np.sqrt(np.sum(w * (a - b) ** 2) / np.sum(w * b**2)))


def reg_sweep(op: ObservationOperator, obs: ObservationData, f_true: np.ndarray, regs: Sequence[float]) -> list[dict]:
    rows = []
    for reg in regs:
        res = tikhonov_reconstruct(op, obs, reg)
        w = quadrature_weights(op.grid, op.grid.interior_mask())
        rows.append(
            {
                "reg": reg,
                "error": relative_l2(res.f, f_true, op.grid),
                "f_norm": float(np.sqrt(np.sum(w * res.f**2))),
                "iterations": res.iterations,
            }
        )
    return rows


def random_sources(grid: Grid, n: int, modes: int, seed: int) -> list[np.ndarray]:
    """Truncated random sine sums; the coefficients depend only on (seed, n, modes), not on the grid."""
    rng = np.random.default_rng(seed)
    K = min(modes, min(grid.nodes) // 4)
    if K < 1:
        raise ValueError("grid too coarse for the random source ensemble")
    mesh = grid.mesh()
    xh = [(mesh[a] - grid.extents[a][0]) / (grid.extents[a][1] - grid.extents[a][0]) for a in range(grid.dim)]
    out = []
    for _ in range(n):
        coef = rng.standard_normal((modes,) * grid.dim)
        f = np.zeros(grid.shape)
        for ks in np.ndindex(*(K,) * grid.dim):
            term = coef[ks] / (1.0 + sum(ks))
            for a, k in enumerate(ks):
                term = term * np.sin((k + 1) * np.pi * xh[a])
            f += term
        out.append(f)
    return out


@dataclass
class LipschitzTable:
    ratios: list
    skipped: int = 0
    rows: list = field(default_factory=list)

    @property
    def max(self) -> float:
        return float(np.max(self.ratios)) if self.ratios else float("nan")

    @property
    def median(self) -> float:
        return float(np.median(self.ratios)) if self.ratios else float("nan")


def stability_ratio(op: ObservationOperator, f: np.ndarray) -> Optional[float]:
    """ρ = ||f||_{L²} / (||y||_{H¹(window; L²(ω))} + ||y(θ)||_{H⁴}); None when f ≡ 0."""
    fi = op.restrict(f)
    fn = float(np.sqrt(np.sum(op.w_f * fi**2)))
    obs = op.apply(fi)
    a, b = op.split_norms(obs)
    if fn == 0.0 and a + b == 0.0:
        return None
    return fn / (a + b)


def lipschitz_ensemble(
    n_samples: int,
    grid: Grid,
    coeffs: CoefficientSet,
    R: np.ndarray,
    masks: SubdomainMasks,
    seed: int,
    modes: int = 8,
    theta: Optional[float] = None,
    t1: Optional[float] = None,
    op: Optional[ObservationOperator] = None,
) -> LipschitzTable:
    if n_samples < 20:
        raise ValueError("the ensemble needs at least 20 members")
    op = op or ObservationOperator(grid, coeffs, R, masks, theta, t1)
    table = LipschitzTable([])
    for i, f in enumerate(random_sources(grid, n_samples, modes, seed)):
        rho = stability_ratio(op, f)
        if rho is None:
            table.skipped += 1
            continue
        table.ratios.append(rho)
        table.rows.append({"member": i, "rho": rho})
    return table


def adjoint_consistency(op: ObservationOperator, seed: int = 0) -> float:
    """|⟨A u, r⟩_data − ⟨u, A* r⟩_{L²}| / max of the two, for seeded random u and r."""
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(op.n_unknowns)
    r = ObservationData(
        rng.standard_normal((len(op.levels), len(op.omega_nodes))),
        op.embed(rng.standard_normal(op.n_unknowns)),
        op.theta,
        op.t1,
    )
    lhs = op.inner(op.apply(u), r)
    rhs = float(np.sum(op.w_f * u * op.adjoint(r)))
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)


def synthetic_observation(
    grid: Grid,
    coeffs: CoefficientSet,
    source: SourceModel,
    op: ObservationOperator,
    noise: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> tuple[np.ndarray, ObservationData]:
    """Forward-solve with y(·,0) = 0, observe, and optionally add noise of relative data-norm size ``noise``."""
    y = solve_forward(grid, coeffs, source).values
    obs = op.observe(y)
    if noise > 0:
        rng = rng or np.random.default_rng(0)
        pert = ObservationData(
            rng.standard_normal(obs.y_omega.shape),
            np.where(grid.interior_mask(), rng.standard_normal(grid.shape), 0.0),
            obs.theta,
            obs.t1,
        )
        scale = noise * op.data_norm(obs) / op.data_norm(pert)
        obs = ObservationData(obs.y_omega + scale * pert.y_omega, obs.y_theta + scale * pert.y_theta, obs.theta, obs.t1, noise)
    return y, obs
