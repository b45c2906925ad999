"""
Empirical checks of the weighted estimate for P = ∂ₜ + Δ² + lower order.

    lhs     = ∫∫ (s⁶φ⁶|y|² + s⁴φ⁴|∇y|² + s²φ²|∇∇y|² + sφ|∇Δy|² + (sφ)⁻¹(|∂ₜy|² + |∇∇y|²)) e^{2sα}
    rhs_pde = ∫∫ |Py|² e^{2sα}
    rhs_obs = ||y||²_{L²(ω × (t0 − τ, t0 + τ))}

The weights overflow or underflow long before s gets interesting, so every
weighted integral is accumulated as a log-sum-exp.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .forward import modal_solution
from .geometry import Grid, SubdomainMasks
from .operators import CoefficientSet, multi_indices, operators_for, quadrature_weights
from .weights import WeightParams

logger = logging.getLogger(__name__)

LHS_POWERS = (6, 4, 2, 1, -1)


def _log(x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(x)


def window_levels(grid: Grid, params: WeightParams, margin: int = 1) -> np.ndarray:
    """Time levels inside the window with ``margin`` cells dropped at each singular end."""
    if margin < 1:
        raise ValueError("margin must be at least one cell: h(t) is infinite at the window ends")
    t = grid.times
    tol = 1e-9 * grid.dt
    lo = params.t0 - params.tau + margin * grid.dt
    hi = params.t0 + params.tau - margin * grid.dt
    levels = np.flatnonzero((t >= lo - tol) & (t <= hi + tol))
    if levels.size < 2:
        raise ValueError(f"window ({params.t0 - params.tau}, {params.t0 + params.tau}) holds fewer than two usable levels")
    return levels


def _closed_window_levels(grid: Grid, params: WeightParams) -> np.ndarray:
    t = grid.times
    tol = 1e-9 * grid.dt
    return np.flatnonzero((t >= params.t0 - params.tau - tol) & (t <= params.t0 + params.tau + tol))


def _trapezoid_time(n: int, dt: float) -> np.ndarray:
    w = np.full(n, dt)
    w[0] = w[-1] = 0.5 * dt
    return w


def check_navier(y: np.ndarray, grid: Grid, tol: float = 1e-8) -> None:
    """y = Δy = 0 on ∂Ω at every level (relative to max |y|)."""
    scale = max(float(np.max(np.abs(y))), 1e-300)
    bnd = grid.boundary_mask()
    if np.max(np.abs(y[:, bnd]), initial=0.0) > tol * scale:
        raise ValueError("field violates y = 0 on the boundary")
    lap = operators_for(grid).laplacian()(y)
    lap_scale = max(float(np.max(np.abs(lap))), scale)
    if np.max(np.abs(lap[:, bnd]), initial=0.0) > 0.05 * lap_scale:
        raise ValueError("field violates Laplacian = 0 on the boundary")


@dataclass
class FieldPieces:
    """s-independent squared magnitudes on the usable window levels, flattened per level."""

    log_q: dict
    log_pde: np.ndarray
    obs: float
    levels: np.ndarray


def field_pieces(
    y: np.ndarray,
    grid: Grid,
    coeffs: CoefficientSet,
    params: WeightParams,
    masks: SubdomainMasks,
    margin: int = 1,
    check_bc: bool = True,
) -> FieldPieces:
    y = np.asarray(y, dtype=float)
    if y.shape != (grid.Nt + 1,) + grid.shape:
        raise ValueError(f"field shape {y.shape} does not match the grid {(grid.Nt + 1,) + grid.shape}")
    if check_bc:
        check_navier(y, grid)
    ops = operators_for(grid)
    levels = window_levels(grid, params, margin)
    yl = y[levels]
    dt_y = np.gradient(y, grid.dt, axis=0, edge_order=2)[levels]

    grad_sq = np.zeros_like(yl)
    hess_sq = np.zeros_like(yl)
    for beta in multi_indices(grid.dim, 1, 1):
        grad_sq += ops.derivative(beta)(yl) ** 2
    for a in range(grid.dim):
        for b in range(grid.dim):
            beta = [0] * grid.dim
            beta[a] += 1
            beta[b] += 1
            hess_sq += ops.derivative(beta)(yl) ** 2
    lap = ops.laplacian()(yl)
    grad_lap_sq = np.zeros_like(yl)
    for beta in multi_indices(grid.dim, 1, 1):
        grad_lap_sq += ops.derivative(beta)(lap) ** 2

    K = ops.biharmonic_navier().matrix + ops.lower_order(coeffs)
    flat = yl.reshape(len(levels), -1)
    Py = dt_y.reshape(len(levels), -1) + (K @ flat.T).T

    n = len(levels)
    log_q = {
        6: _log(flat**2),
        4: _log(grad_sq.reshape(n, -1)),
        2: _log(hess_sq.reshape(n, -1)),
        1: _log(grad_lap_sq.reshape(n, -1)),
        -1: _log((dt_y**2 + hess_sq).reshape(n, -1)),
    }

    closed = _closed_window_levels(grid, params)
    w_obs = quadrature_weights(grid, masks.omega).ravel()
    wt = _trapezoid_time(len(closed), grid.dt)
    obs = float(np.sum(wt[:, None] * w_obs[None, :] * y[closed].reshape(len(closed), -1) ** 2))
    return FieldPieces(log_q, _log(Py**2), obs, levels)


@dataclass(frozen=True)
class CarlemanSides:
    """lhs and rhs_pde are stored as logs; exp() of them may underflow for large s."""

    log_lhs: float
    log_rhs_pde: float
    rhs_obs: float

    @property
    def lhs(self) -> float:
        return math.exp(self.log_lhs) if np.isfinite(self.log_lhs) else 0.0

    @property
    def rhs_pde(self) -> float:
        return math.exp(self.log_rhs_pde) if np.isfinite(self.log_rhs_pde) else 0.0

    def ratio(self) -> float:
        """C_emp = lhs / (rhs_pde + rhs_obs), formed in log space."""
        if not np.isfinite(self.log_lhs):
            return 0.0
        log_obs = math.log(self.rhs_obs) if self.rhs_obs > 0 else -math.inf
        denom = np.logaddexp(self.log_rhs_pde, log_obs)
        if not np.isfinite(denom):
            return math.inf
        return math.exp(self.log_lhs - denom)


def _log_weighted(log_q: np.ndarray, log_w: np.ndarray) -> float:
    total = log_q + log_w
    if not np.any(np.isfinite(total)):
        return -math.inf
    return float(logsumexp(total[np.isfinite(total)]))


def sides_from_pieces(pieces: FieldPieces, grid: Grid, params: WeightParams, s: float) -> CarlemanSides:
    p = params.with_(s=s)
    times = grid.times[pieces.levels]
    n = len(times)
    alpha = p.alpha(times).reshape(n, -1)
    log_phi = p.log_phi(times).reshape(n, -1)
    log_quad = _log(quadrature_weights(grid).ravel())[None, :] + _log(_trapezoid_time(n, grid.dt))[:, None]
    base = 2.0 * s * alpha + log_quad
    terms = [k * math.log(s) + _log_weighted(pieces.log_q[k], base + k * log_phi) for k in LHS_POWERS]
    terms = [t for t in terms if np.isfinite(t)]
    log_lhs = float(logsumexp(terms)) if terms else -math.inf
    log_pde = _log_weighted(pieces.log_pde, base)
    return CarlemanSides(log_lhs, log_pde, pieces.obs)


def carleman_sides(
    y: np.ndarray,
    grid: Grid,
    coeffs: CoefficientSet,
    params: WeightParams,
    masks: SubdomainMasks,
    margin: int = 1,
) -> CarlemanSides:
    """Both sides of the weighted estimate for one field at ``params.s``."""
    pieces = field_pieces(y, grid, coeffs, params, masks, margin)
    return sides_from_pieces(pieces, grid, params, params.s)


@dataclass
class RatioTable:
    s_values: list
    ratios: np.ndarray
    rise: float
    min_above: int
    knee: Optional[int] = None

    @property
    def cmax(self) -> np.ndarray:
        return np.max(self.ratios, axis=1)

    @property
    def s0(self) -> Optional[float]:
        return None if self.knee is None else self.s_values[self.knee]

    def bounded(self) -> bool:
        """A knee exists with at least ``min_above`` sweep points beyond it, all within ``rise`` of it."""
        if self.knee is None or not np.all(np.isfinite(self.cmax)):
            return False
        above = len(self.s_values) - 1 - self.knee
        tail = self.cmax[self.knee :]
        return above >= self.min_above and float(np.max(tail)) <= self.rise * float(self.cmax[self.knee])

    def rows(self) -> list[dict]:
        out = []
        for i, s in enumerate(self.s_values):
            for j in range(self.ratios.shape[1]):
                out.append({"s": s, "member": j, "C_emp": float(self.ratios[i, j]), "C_max": float(self.cmax[i])})
        return out


def weight_resolution_limit(grid: Grid, params: WeightParams, c_res: float = 2.0) -> float:
    """Largest s with s · max|∇α(·, t0)| · h ≤ c_res.

    Beyond this the grid no longer resolves e^{2sα} and the discrete estimate
    degrades, as discrete Carleman estimates only hold for sh small.
    """
    from .weights import distance_gradient_norm

    grad = distance_gradient_norm(params.d, grid) * params.lam * np.exp(params.lam * params.d) / params.tau
    return c_res / (float(np.max(grad)) * max(grid.spacing))


def carleman_s_sweep(grid: Grid, params: WeightParams, s_min: float, per_decade: int = 4, c_res: float = 2.0) -> list[float]:
    """Geometric s values from s_min up to the resolution limit."""
    s_max = weight_resolution_limit(grid, params, c_res)
    if not s_max > s_min:
        raise ValueError(f"s_min={s_min} exceeds the resolved range s <= {s_max:.4g}")
    n = int(math.floor(per_decade * math.log10(s_max / s_min) + 1e-9))
    return [s_min * 10.0 ** (k / per_decade) for k in range(n + 1)]


def find_knee(cmax: Sequence[float], rise: float = 1.2) -> Optional[int]:
    """Smallest index i with cmax[j] ≤ rise · cmax[i] for every j ≥ i."""
    cmax = np.asarray(cmax, dtype=float)
    for i in range(len(cmax)):
        if np.all(cmax[i:] <= rise * cmax[i]):
            return i
    return None


def ratio_sweep(
    suite: Sequence[np.ndarray],
    grid: Grid,
    coeffs: CoefficientSet,
    params: WeightParams,
    masks: SubdomainMasks,
    s_values: Sequence[float],
    rise: float = 1.2,
    min_above: int = 5,
    margin: int = 1,
) -> RatioTable:
    """C_emp(s, y) over a suite of fields and a geometric s-sweep."""
    if len(s_values) < min_above + 1:
        raise ValueError(f"s-sweep has {len(s_values)} points; a knee with {min_above} points above needs {min_above + 1}")
    pieces = [field_pieces(y, grid, coeffs, params, masks, margin) for y in suite]
    ratios = np.array([[sides_from_pieces(p, grid, params, s).ratio() for p in pieces] for s in s_values])
    table = RatioTable(list(s_values), ratios, rise, min_above)
    table.knee = find_knee(table.cmax, rise)
    return table


def _gap_interval(masks: SubdomainMasks, grid: Grid, axis: int) -> tuple[float, float]:
    """Largest interval along ``axis`` between the boundary and ω."""
    lo, hi = grid.extents[axis]
    wlo, whi = masks.omega_box[axis]
    return (lo, wlo) if wlo - lo >= hi - whi else (whi, hi)


def _bump(x: np.ndarray, a: float, b: float) -> np.ndarray:
    """sin⁵ on [a, b], zero outside: C⁴ across the ends, with y = y'' = 0 there."""
    u = (x - a) / (b - a)
    return np.where((u > 0) & (u < 1), np.sin(np.pi * np.clip(u, 0, 1)) ** 5, 0.0)


def build_suite(grid: Grid, masks: SubdomainMasks, params: WeightParams, n: int = 10, seed: int = 0) -> list[np.ndarray]:
    """Navier-compatible test fields: modal solutions, random sine series, and fields vanishing on ω."""
    if n < 3:
        raise ValueError("suite needs at least three members")
    rng = np.random.default_rng(seed)
    t = grid.times.reshape((-1,) + (1,) * grid.dim)
    mesh = grid.mesh()
    xh = [(mesh[a] - grid.extents[a][0]) / (grid.extents[a][1] - grid.extents[a][0]) for a in range(grid.dim)]

    suite = [modal_solution(grid, 1, params.t0)]
    if n > 3:
        suite.append(modal_solution(grid, 2, params.t0))
    n_off = max(1, (n - len(suite)) // 3)
    n_rand = n - len(suite) - n_off
    for _ in range(n_rand):
        prof = np.zeros(grid.shape)
        for ks in np.ndindex(*(4,) * grid.dim):
            term = rng.standard_normal() / (1.0 + sum(ks)) ** 2
            for a, k in enumerate(ks):
                term = term * np.sin((k + 1) * np.pi * xh[a])
            prof += term
        freq, phase = rng.uniform(0.5, 3.0), rng.uniform(0, 2 * np.pi)
        suite.append((1.0 + 0.5 * np.cos(2 * np.pi * freq * t / grid.T + phase)) * prof)
    a, b = _gap_interval(masks, grid, 0)
    for j in range(n_off):
        prof = _bump(mesh[0], a, b)
        for ax in range(1, grid.dim):
            prof = prof * np.sin((j + 1) * np.pi * xh[ax])
        freq = rng.uniform(0.5, 3.0)
        suite.append(np.sin(np.pi * freq * t / grid.T + 0.3) * prof)
    for y in suite:
        y[:, grid.boundary_mask()] = 0.0
    return suite


@dataclass(frozen=True)
class EnergyShift:
    """Values are multiplied by exp(−log_scale); ratios are unaffected."""

    lhs_point: float
    rhs_int: float
    identity: float
    log_scale: float

    @property
    def ratio(self) -> float:
        return self.lhs_point / self.rhs_int if self.rhs_int > 0 else (0.0 if self.lhs_point == 0 else math.inf)

    @property
    def identity_error(self) -> float:
        if self.lhs_point == 0:
            return abs(self.identity)
        return abs(self.identity - self.lhs_point) / self.lhs_point


def check_energy_shift(z: np.ndarray, grid: Grid, params: WeightParams, margin: int = 1) -> EnergyShift:
    """Pointwise weighted energy at θ = t0 against its space-time bound, plus the FTC identity."""
    z = np.asarray(z, dtype=float)
    if z.shape != (grid.Nt + 1,) + grid.shape:
        raise ValueError("field shape does not match the grid")
    theta, t1 = params.t0, params.tau
    if theta - t1 < -1e-12 or theta + t1 > grid.T + 1e-12:
        raise ValueError(f"window ({theta - t1}, {theta + t1}) leaves (0, T={grid.T})")
    m_theta = grid.time_index(theta)
    if abs(grid.times[m_theta] - theta) > 1e-9 * grid.dt:
        raise ValueError(f"theta={theta} is not a time level")
    m_lo = grid.time_index(theta - t1)
    if abs(grid.times[m_lo] - (theta - t1)) > 1e-9 * grid.dt:
        raise ValueError("theta - t1 is not a time level")

    wx = quadrature_weights(grid).ravel()
    log_wx = _log(wx)
    dz = np.gradient(z, grid.dt, axis=0, edge_order=2)
    s = params.s

    alpha_theta = params.alpha([theta]).reshape(-1)
    log_scale = float(2 * s * np.max(alpha_theta))
    z_theta = z[m_theta].ravel()
    lhs = float(np.sum(wx * z_theta**2 * np.exp(2 * s * alpha_theta - log_scale)))

    levels = window_levels(grid, params, margin)
    times = grid.times[levels]
    n = len(levels)
    alpha = params.alpha(times).reshape(n, -1)
    log_phi = params.log_phi(times).reshape(n, -1)
    zl, dzl = z[levels].reshape(n, -1), dz[levels].reshape(n, -1)
    wt = _trapezoid_time(n, grid.dt)
    ew = np.exp(2 * s * alpha - log_scale + log_wx[None, :])
    rhs = float(np.sum(wt[:, None] * ew * (np.abs(zl * dzl) + s * np.exp(2 * log_phi) * zl**2)))

    # ∫_{θ−t1}^{θ} ∫ (2z∂ₜz + 2s ∂ₜα |z|²) e^{2sα}; the integrand vanishes at θ − t1
    idx = np.arange(m_lo, m_theta + 1)
    ti = grid.times[idx]
    integrand = np.zeros(len(idx))
    inner = ti > theta - t1 + 1e-12 * grid.dt
    tin = ti[inner]
    a_in = params.alpha(tin).reshape(len(tin), -1)
    da_in = params.dalpha_dt(tin).reshape(len(tin), -1)
    zi, dzi = z[idx[inner]].reshape(len(tin), -1), dz[idx[inner]].reshape(len(tin), -1)
    with np.errstate(over="ignore", invalid="ignore"):
        vals = (2 * zi * dzi + 2 * s * da_in * zi**2) * np.exp(2 * s * a_in - log_scale)
    integrand[inner] = np.sum(np.nan_to_num(vals) * wx[None, :], axis=1)
    identity = float(np.sum(_trapezoid_time(len(idx), grid.dt) * integrand))
    return EnergyShift(lhs, rhs, identity, log_scale)


@dataclass
class CollapseTable:
    s_values: list
    integrals: list
    C0: float
    window: float

    def strictly_decreasing(self) -> bool:
        return all(b < a for a, b in zip(self.integrals, self.integrals[1:]))

    def collapse_ratio(self) -> float:
        return self.integrals[-1] / self.integrals[0]

    def rows(self) -> list[dict]:
        return [{"s": s, "I": i} for s, i in zip(self.s_values, self.integrals)]


def collapse_constant(params: WeightParams) -> float:
    """C0 = 2 (e^{2λ max d} − e^{λ min d}) bounding 2(α(x,t) − α(x,θ)) / (h(t) − h(θ)) from below."""
    return 2.0 * (params.e_top - math.exp(params.lam * params.d_min))


def collapse_integral(s: float, C0: float, t1: float, n: int = 4001, cut: float = 60.0) -> float:
    """I(s) = ∫_{θ−t1}^{θ+t1} e^{−C0 s (h(t) − h(θ))} dt via t = θ + t1 sin u.

    The integrand e^{−C0 s (sec u − 1)/t1} t1 cos u is smooth on (−π/2, π/2);
    it is truncated where the exponent exceeds ``cut``.
    """
    if s < 0:
        raise ValueError("s must be non-negative")
    if s == 0:
        return 2.0 * t1
    u_max = min(math.pi / 2, math.acos(1.0 / (1.0 + cut * t1 / (C0 * s))))
    u = np.linspace(-u_max, u_max, n)
    with np.errstate(over="ignore"):
        f = np.exp(-C0 * s * (1.0 / np.cos(u) - 1.0) / t1) * t1 * np.cos(u)
    f = np.nan_to_num(f)
    return float(np.sum((f[1:] + f[:-1]) * 0.5 * np.diff(u)))


def check_lebesgue_collapse(params: WeightParams, s_values: Sequence[float], n: int = 4001) -> CollapseTable:
    C0 = collapse_constant(params)
    if not C0 > 0:
        raise ValueError("collapse constant must be positive")
    vals = [collapse_integral(s, C0, params.tau, n) for s in s_values]
    return CollapseTable(list(s_values), vals, C0, 2 * params.tau)
