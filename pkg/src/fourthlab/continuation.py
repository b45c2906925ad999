"""
Continuation from lateral Cauchy data on a face Γ.

The reconstruction is a Carleman-weighted quasi-reversibility: on each time
window (t0 − τ, t0 + τ) we minimise

    Σ e^{2sα} |P v − F|² + (Cauchy mismatch on Γ) + reg |v|²

over v = u − ũ, where ũ is a Taylor lifting of the traces and F = −P ũ. The
central quarter of every window is kept and overlapping windows are averaged.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import Face, Grid, SubdomainMasks
from .operators import (
    CauchyTrace,
    CoefficientSet,
    cauchy_data_size,
    extract_cauchy,
    multi_indices,
    normal_derivative_stencil,
    operators_for,
    quadrature_weights,
    spacetime_norm,
    time_weights,
)
from .weights import LevelThresholds, WeightParams, ramp

logger = logging.getLogger(__name__)

STATIONARITY_TOL = 1e-8


class ContinuationError(RuntimeError):
    pass


def normal_coordinate(grid: Grid, face: Face) -> np.ndarray:
    """Signed distance along the outward normal of ``face`` (negative inside Ω)."""
    lo, hi = grid.extents[face.axis]
    x = grid.mesh()[face.axis]
    return lo - x if face.side == "low" else x - hi


def lifting_cutoff(r: np.ndarray, inner: float, outer: float) -> np.ndarray:
    """1 for |r| ≤ inner, C⁴ decay to 0 at |r| = outer."""
    return 1.0 - ramp((np.abs(r) - inner) / (outer - inner))


def _face_broadcast(values: np.ndarray, grid: Grid, face: Face) -> np.ndarray:
    """Spread per-face-node values (levels, n_face) along the normal axis."""
    levels = values.shape[0]
    if grid.dim == 1:
        return values.reshape(levels, 1)
    shape = [levels, 1, 1]
    shape[1 + (1 - face.axis)] = values.shape[1]
    return values.reshape(shape)


def extend_cauchy(
    trace: CauchyTrace,
    grid: Grid,
    inner: Optional[float] = None,
    outer: Optional[float] = None,
) -> np.ndarray:
    """ũ = Σ_j g_j r^j / j! · cutoff(r), matching the four normal traces on Γ."""
    face = trace.face
    n_face = int(grid.face_mask(face).sum())
    if trace.values.shape[2] != n_face or trace.values.shape[1] != grid.Nt + 1:
        raise ValueError(
            f"trace shape {trace.values.shape[1:]} does not match the face ({grid.Nt + 1} levels, {n_face} nodes)"
        )
    L = grid.extents[face.axis][1] - grid.extents[face.axis][0]
    inner = 0.25 * L if inner is None else inner
    outer = 0.5 * L if outer is None else outer
    r = normal_coordinate(grid, face)
    cut = lifting_cutoff(r, inner, outer)
    out = np.zeros((grid.Nt + 1,) + grid.shape)
    for j in range(4):
        out += _face_broadcast(trace.values[j], grid, face) * (r**j / math.factorial(j) * cut)
    return out


def zero_extend(
    v: np.ndarray,
    grid: Grid,
    big: Grid,
    masks: SubdomainMasks,
    tol: float = 1e-8,
) -> np.ndarray:
    """Extend v by zero from Ω to Ω₁; v must have (numerically) vanishing traces on Γ."""
    face = masks.gamma_face
    tr = extract_cauchy(np.asarray(v, dtype=float), grid, face)
    worst = np.max(np.abs(tr.values), axis=(1, 2))
    if np.max(worst) > tol:
        j = int(np.argmax(worst))
        raise ValueError(
            f"v has a nonvanishing Cauchy trace on Gamma: max |d_nu^{j} v| = {worst[j]:.3e} > tol {tol:.1e}"
        )
    out = np.zeros((v.shape[0],) + big.shape)
    out[(slice(None),) + masks.domain_slices] = v
    return out


def strip_residual(
    v_ext: np.ndarray,
    F_ext: np.ndarray,
    big: Grid,
    masks: SubdomainMasks,
    coeffs: CoefficientSet,
    width: int = 2,
) -> float:
    """Discrete L² norm of P v_ext − F_ext over nodes within ``width`` cells of Γ (levels 1..Nt)."""
    ops = operators_for(big)
    K = ops.biharmonic().matrix + ops.lower_order(coeffs)
    flat = v_ext.reshape(v_ext.shape[0], -1)
    res = (flat[1:] - flat[:-1]) / big.dt + (K @ flat[1:].T).T - F_ext.reshape(F_ext.shape[0], -1)[1:]
    from .geometry import _dilate

    strip = _dilate(masks.gamma, width) & (big.distance_to_boundary() >= 2)
    w = quadrature_weights(big) * strip
    wt = time_weights(res.shape[0], big.dt)
    return float(np.sqrt(np.sum(wt[:, None] * w.ravel()[None, :] * res**2)))


@dataclass
class QRSettings:
    lam: float = 1.0
    s: float = 0.02
    tau: float = 0.005
    eps: float = 0.01
    reg: float = 1e-10
    cauchy_weight: float = 1.0
    lift_inner: Optional[float] = None
    lift_outer: Optional[float] = None

    def validate(self, T: float) -> None:
        if not self.eps > self.tau:
            raise ValueError(f"window violates eps > tau (eps={self.eps}, tau={self.tau})")
        if not 2 * self.eps < T:
            raise ValueError(f"eps={self.eps} leaves no interval (eps, T - eps) for T={T}")
        if self.reg < 0:
            raise ValueError("reg must be non-negative")


@dataclass
class ContinuationResult:
    grid: Grid
    values: np.ndarray
    mask: np.ndarray
    levels: np.ndarray
    windows: list = field(default_factory=list)

    def restricted(self) -> np.ndarray:
        return self.values[self.levels][:, self.mask]


def window_centres(T: float, settings: QRSettings) -> list[float]:
    """t0 values whose quarter windows (t0 ± τ/4) overlap by half and cover [ε, T − ε]."""
    step = settings.tau / 4.0
    n = int(math.ceil((T - 2 * settings.eps) / step - 1e-9))
    return [settings.eps + k * step for k in range(n + 1)]


class QRSolver:
    """Assembles and solves the weighted least-squares problem for one grid and settings."""

    def __init__(
        self,
        grid: Grid,
        coeffs: CoefficientSet,
        face: Face,
        d: np.ndarray,
        d_max: float,
        d_min: float,
        settings: QRSettings,
    ):
        settings.validate(grid.T)
        self.grid = grid
        self.face = face
        self.settings = settings
        self.d = d
        self.d_max = d_max
        self.d_min = d_min
        ops = operators_for(grid)
        self.K = sp.csr_matrix(ops.biharmonic().matrix + ops.lower_order(coeffs))
        self.pde_nodes = np.flatnonzero((grid.distance_to_boundary() >= 2).ravel())
        self.trace_rows = [normal_derivative_stencil(grid, face, j) for j in range(4)]
        # rows carry √(quadrature weight) so the functional approximates its continuum form
        self.wx = quadrature_weights(grid).ravel()
        row_norm = float(
            np.max(np.sqrt(np.asarray((self.K[self.pde_nodes].multiply(self.K[self.pde_nodes])).sum(axis=1)).ravel()
                           + 1.0 / grid.dt**2))
        )
        strength = row_norm * math.sqrt(float(np.max(self.wx)) * grid.dt)
        self.trace_scale = [
            strength / float(np.max(np.sqrt(np.asarray(R.multiply(R).sum(axis=1)).ravel()))) for R in self.trace_rows
        ]
        self._systems: dict = {}

    def params(self, t0: float) -> WeightParams:
        s = self.settings
        return WeightParams(s.lam, s.s, t0, s.tau, self.d, self.d_max, self.d_min)

    def window_levels(self, t0: float) -> np.ndarray:
        g = self.grid
        tau = self.settings.tau
        m0 = int(math.ceil((t0 - tau) / g.dt - 1e-9))
        m1 = int(math.floor((t0 + tau) / g.dt + 1e-9))
        m0 = max(m0, 0)
        m1 = min(m1, g.Nt)
        if m1 - m0 < 2:
            raise ContinuationError("time window holds fewer than three levels")
        return np.arange(m0, m1 + 1)

    def _regularisation(self, n: int) -> np.ndarray:
        return self.settings.reg * np.tile(self.wx * self.grid.dt, n // self.grid.size)

    def _factor(self, A: sp.spmatrix, t0: float):
        """LU of the augmented system [[I, A], [Aᵀ, −reg W]] for min |Av − b|² + reg ||v||²_{L²}."""
        m, n = A.shape
        aug = sp.bmat([[sp.identity(m), A], [A.T, -sp.diags(self._regularisation(n))]], format="csc")
        try:
            return aug, spla.splu(aug)
        except RuntimeError as exc:
            raise ContinuationError(f"least-squares system is singular at t0={t0}: {exc}") from exc

    def _least_squares(self, A: sp.spmatrix, aug: sp.spmatrix, lu, b: np.ndarray, t0: float) -> np.ndarray:
        m, n = A.shape
        rhs = np.concatenate([b, np.zeros(n)])
        sol = lu.solve(rhs)
        sol += lu.solve(rhs - aug @ sol)
        v = sol[m:]
        err = _stationarity(A, b, v, self._regularisation(n))
        if not np.all(np.isfinite(v)) or err > STATIONARITY_TOL:
            raise ContinuationError(f"least-squares solve did not converge at t0={t0} (stationarity {err:.3e})")
        return v

    def _assemble(self, t0: float, levels: np.ndarray) -> "_WindowSystem":
        g = self.grid
        st = self.settings
        L = len(levels)
        N = g.size
        times = g.times[levels]
        alpha = self.params(t0).alpha(times[1:]).reshape(L - 1, -1)[:, self.pde_nodes]
        finite = np.isfinite(alpha)
        log_w = np.where(finite, st.s * alpha, -np.inf)
        log_w -= np.max(log_w[finite])
        wts = np.exp(log_w)

        blocks, pde_rows = [], []
        idt = 1.0 / g.dt
        Kp = self.K[self.pde_nodes]
        Ip = sp.identity(N, format="csr")[self.pde_nodes]
        for l in range(1, L):
            w = wts[l - 1]
            keep = w > 0
            if not keep.any():
                continue
            scale = np.sqrt(self.wx[self.pde_nodes][keep] * g.dt) * w[keep]
            W = sp.diags(scale)
            cur = W @ (idt * Ip[keep] + Kp[keep])
            prev = W @ (-idt * Ip[keep])
            k = int(keep.sum())
            blocks.append(sp.hstack([sp.csr_matrix((k, (l - 1) * N)), prev, cur, sp.csr_matrix((k, (L - l - 1) * N))]))
            pde_rows.append((l, keep, scale))
        for j in range(4):
            Rj = self.trace_rows[j] * (st.cauchy_weight * self.trace_scale[j])
            blocks.append(sp.block_diag([Rj] * L, format="csr"))
        A = sp.vstack(blocks, format="csr")
        aug, lu = self._factor(A, t0)
        return _WindowSystem(A, aug, lu, pde_rows)

    def solve_window(self, t0: float, lift: np.ndarray, trace: CauchyTrace) -> tuple[np.ndarray, np.ndarray]:
        """Return (levels, u on those levels) for the window centred at t0.

        The weights depend on t − t0 only and the coefficients on x only, so the
        factorised system is shared by every window with the same length and the
        same offset of t0 from the time grid.
        """
        g = self.grid
        st = self.settings
        levels = self.window_levels(t0)
        L = len(levels)
        key = (L, round((t0 - g.times[levels[0]]) / g.dt, 6))
        system = self._systems.get(key)
        if system is None:
            system = self._assemble(t0, levels)
            self._systems[key] = system

        idt = 1.0 / g.dt
        lift_flat = lift[levels].reshape(L, -1)
        rhs = []
        for l, keep, scale in system.pde_rows:
            F = -(idt * (lift_flat[l] - lift_flat[l - 1]) + self.K @ lift_flat[l])[self.pde_nodes][keep]
            rhs.append(scale * F)
        for j in range(4):
            Rj = self.trace_rows[j] * (st.cauchy_weight * self.trace_scale[j])
            target = trace.values[j][levels] * (st.cauchy_weight * self.trace_scale[j])
            rhs.append((target - (Rj @ lift_flat.T).T).ravel())
        b = np.concatenate(rhs)
        v = self._least_squares(system.A, system.aug, system.lu, b, t0)
        u = v.reshape(L, *g.shape) + lift[levels]
        return levels, u


@dataclass
class _WindowSystem:
    A: sp.spmatrix
    aug: sp.spmatrix
    lu: object
    pde_rows: list


def _stationarity(A: sp.spmatrix, b: np.ndarray, v: np.ndarray, reg) -> float:
    """Relative size of the gradient Aᵀ(b − Av) − reg v of the least-squares functional."""
    r = b - A @ v
    g = A.T @ r - reg * v
    scale = spla.norm(A, 1) * (np.linalg.norm(r) + spla.norm(A, 1) * np.linalg.norm(v)) + np.linalg.norm(A.T @ b)
    return float(np.linalg.norm(g) / max(scale, 1e-300))


def qr_continue(
    trace: CauchyTrace,
    coeffs: CoefficientSet,
    grid: Grid,
    d: np.ndarray,
    d_max: float,
    d_min: float,
    settings: QRSettings,
    omega0: Optional[np.ndarray] = None,
    keep_windows: bool = False,
) -> ContinuationResult:
    """Reconstruct u on Ω₀ × (ε, T − ε) from the four traces on Γ."""
    settings.validate(grid.T)
    solver = QRSolver(grid, coeffs, trace.face, d, d_max, d_min, settings)
    lift = extend_cauchy(trace, grid, settings.lift_inner, settings.lift_outer)
    total = np.zeros((grid.Nt + 1,) + grid.shape)
    count = np.zeros(grid.Nt + 1)
    windows = []
    q = settings.tau / 4.0
    for t0 in window_centres(grid.T, settings):
        levels, u = solver.solve_window(t0, lift, trace)
        keep = np.abs(grid.times[levels] - t0) <= q + 1e-9 * grid.dt
        total[levels[keep]] += u[keep]
        count[levels[keep]] += 1
        if keep_windows:
            windows.append((t0, levels[keep], u[keep]))
    times = grid.times
    in_range = (times >= settings.eps - 1e-9 * grid.dt) & (times <= grid.T - settings.eps + 1e-9 * grid.dt)
    if np.any(in_range & (count == 0)):
        raise ContinuationError("window covering leaves time levels of (eps, T - eps) uncovered")
    values = np.full_like(total, np.nan)
    hit = count > 0
    values[hit] = total[hit] / count[hit].reshape((-1,) + (1,) * grid.dim)
    mask = np.ones(grid.shape, dtype=bool) if omega0 is None else omega0
    return ContinuationResult(grid, values, mask, np.flatnonzero(in_range), windows)


def J_magnitude(w: np.ndarray, grid: Grid) -> np.ndarray:
    """Σ_{|β|≤2} |∂^β w| + |∇Δw| + |Δ²w| + |∂ₜw| at every node and level (one-sided near faces)."""
    ops = operators_for(grid)
    out = np.zeros_like(w)
    for beta in multi_indices(grid.dim, 2):
        out += np.abs(ops.derivative(beta)(w))
    lap = ops.laplacian()(w)
    grad_sq = np.zeros_like(w)
    for a in range(grid.dim):
        beta = [0] * grid.dim
        beta[a] = 1
        grad_sq += ops.derivative(beta)(lap) ** 2
    out += np.sqrt(grad_sq)
    out += np.abs(ops.biharmonic()(w))
    out += np.abs(np.gradient(w, grid.dt, axis=0, edge_order=2))
    return out


def J_norm_sq(w: np.ndarray, grid: Grid, region: np.ndarray, levels: np.ndarray) -> float:
    """||J(w)||² over region × the given time levels (trapezoid)."""
    Jw = J_magnitude(w, grid)[levels]
    ws = quadrature_weights(grid, region)
    wt = time_weights(len(levels), grid.dt)
    return float(np.sum(wt[:, None] * (Jw.reshape(len(levels), -1) ** 2 * ws.ravel()[None, :])))


def a_priori_bound(u: np.ndarray, grid: Grid, levels: Optional[np.ndarray] = None) -> float:
    """M = ||u||_{L²(t-range; H³(Ω))}."""
    return spacetime_norm(u, grid, k=3, levels=levels)


@dataclass(frozen=True)
class StabilityBudget:
    M: float
    delta0: float
    C_balance: float

    @property
    def kappa(self) -> float:
        return self.delta0 / (self.C_balance + self.delta0)


def balance_s(D: float, M: float, c: float, delta0: float) -> tuple[float, str]:
    """s* = 2/(c + δ₀) log(M/D) when M > D; otherwise 0 with the 'M <= D' branch tag."""
    if not D > 0:
        raise ValueError(f"data size D must be positive, got {D}")
    if M > D:
        return 2.0 / (c + delta0) * math.log(M / D), "case1"
    return 0.0, "case2"


def two_term_knee(D: float, M: float, c: float, delta0: float, s_max: Optional[float] = None) -> float:
    """argmin over s ≥ 0 of e^{cs}D² + e^{−sδ₀}M², found numerically on a fine grid."""
    if s_max is None:
        s_max = 4.0 * max(1.0, 2.0 / (c + delta0) * abs(math.log(max(M, 1e-300) / D)) + 1.0)
    s = np.linspace(0.0, s_max, 200001)
    log_terms = np.logaddexp(c * s + 2 * math.log(D), -s * delta0 + 2 * math.log(M))
    return float(s[int(np.argmin(log_terms))])


@dataclass
class TwoTermTable:
    """Measured ||J(e)||² against C0 (e^{cs} D² + e^{−sδ₀} M²) over noise levels × s."""

    D: list
    M: float
    delta0: float
    s_values: list
    measured: list
    C0: float
    c_fit: float

    def bound(self, i: int, s: float) -> float:
        return self.C0 * (math.exp(self.c_fit * s) * self.D[i] ** 2 + math.exp(-s * self.delta0) * self.M**2)

    def holds(self) -> bool:
        return all(
            self.measured[i] <= self.bound(i, s) * (1 + 1e-9) for i in range(len(self.D)) for s in self.s_values
        )

    def knees(self) -> list[float]:
        """Numeric argmin over s ≥ 0 of the fitted bound, per noise level."""
        return [two_term_knee(D, self.M, self.c_fit, self.delta0) for D in self.D]

    def balance(self) -> list[tuple[float, str]]:
        return [balance_s(D, self.M, self.c_fit, self.delta0) for D in self.D]

    def knee_ratios(self) -> list[float]:
        """balance s* / fitted knee for the Case-1 levels (M > D)."""
        out = []
        for knee, (s_star, case) in zip(self.knees(), self.balance()):
            if case == "case1" and knee > 0:
                out.append(s_star / knee)
        return out

    def rows(self) -> list[dict]:
        out = []
        for i, D in enumerate(self.D):
            for s in self.s_values:
                out.append(
                    {
                        "D": D,
                        "s": s,
                        "J_sq": self.measured[i],
                        "data_term": self.C0 * math.exp(self.c_fit * s) * D**2,
                        "prior_term": self.C0 * math.exp(-s * self.delta0) * self.M**2,
                        "bound": self.bound(i, s),
                    }
                )
        return out


def fit_two_term(
    D: Sequence[float], measured: Sequence[float], M: float, delta0: float, s_values: Sequence[float]
) -> TwoTermTable:
    """Smallest c ≥ 0 with J² ≤ C0 (e^{cs} D² + e^{−sδ₀} M²) across the table; C0 is pinned by the s = 0 column."""
    D = [float(x) for x in D]
    measured = [float(x) for x in measured]
    if not all(d > 0 for d in D):
        raise ValueError("noise levels must be positive")
    C0 = max(m / (d * d + M * M) for m, d in zip(measured, D))
    c = 0.0
    for m, d in zip(measured, D):
        for s in s_values:
            if s <= 0:
                continue
            need = m / C0 - math.exp(-s * delta0) * M * M
            if need > d * d:
                c = max(c, math.log(need / (d * d)) / s)
    return TwoTermTable(D, float(M), float(delta0), list(s_values), measured, C0, c)


@dataclass
class HolderFit:
    kappa_hat: float
    C_hat: float
    r2: float
    decades: float


def holder_fit(D: Sequence[float], errors: Sequence[float], min_points: int = 5, min_decades: float = 3.0) -> HolderFit:
    """Least-squares line through (log D, log error): slope κ̂, intercept log Ĉ."""
    D = np.asarray(D, dtype=float)
    err = np.asarray(errors, dtype=float)
    if D.size < min_points:
        raise ValueError(f"need at least {min_points} noise levels, got {D.size}")
    if np.any(D <= 0) or np.any(err <= 0):
        raise ValueError("data sizes and errors must be positive")
    decades = float(np.log10(D.max() / D.min()))
    if decades < min_decades - 1e-9:
        raise ValueError(f"noise levels span {decades:.2f} decades; need {min_decades}")
    x, y = np.log(D), np.log(err)
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return HolderFit(float(slope), float(np.exp(intercept)), r2, decades)


def trace_noise(trace: CauchyTrace, level: float, rng: np.random.Generator) -> CauchyTrace:
    """i.i.d. Gaussian perturbation of every g_j, scaled so that its data size D equals ``level``."""
    raw = CauchyTrace(rng.standard_normal(trace.values.shape), trace.dt, trace.face, trace.h_tan)
    size = cauchy_data_size(raw)
    return raw.scaled(level / size)


@dataclass
class NoiseSweep:
    D: list
    errors: list
    J_sq: list
    regs: list
    rows: list = field(default_factory=list)


def noise_sweep(
    trace: CauchyTrace,
    u_true: np.ndarray,
    coeffs: CoefficientSet,
    grid: Grid,
    d: np.ndarray,
    d_max: float,
    d_min: float,
    settings: QRSettings,
    omega0: np.ndarray,
    rel_levels: Sequence[float],
    reg_per_noise: float,
    seed: int,
) -> NoiseSweep:
    """Reconstruct from noisy traces; reg follows the a-priori rule reg = reg_per_noise · D / D(clean).

    Errors are L² over Ω₀ × (ε, T − ε); J² is taken on Ω₀ × (T/2 − τ/4, T/2 + τ/4).
    """
    rng = np.random.default_rng(seed)
    D_clean = cauchy_data_size(trace)
    if not D_clean > 0:
        raise ValueError("clean trace has zero data size")
    t_mid = 0.5 * grid.T
    q = settings.tau / 4.0
    quarter = np.flatnonzero(np.abs(grid.times - t_mid) <= q + 1e-9 * grid.dt)
    out = NoiseSweep([], [], [], [])
    for rel in rel_levels:
        level = float(rel) * D_clean
        noise = trace_noise(trace, level, rng)
        reg = reg_per_noise * float(rel)
        st = QRSettings(**{**settings.__dict__, "reg": reg})
        res = qr_continue(trace + noise, coeffs, grid, d, d_max, d_min, st, omega0=omega0)
        e = res.values - u_true
        err = spacetime_norm(np.where(np.isnan(e), 0.0, e), grid, 0, region=omega0, levels=res.levels)
        e_q = np.nan_to_num(res.values[quarter] - u_true[quarter])
        Jsq = J_norm_sq(e_q, grid, omega0, np.arange(len(quarter)))
        out.D.append(level)
        out.errors.append(err)
        out.J_sq.append(Jsq)
        out.regs.append(reg)
        out.rows.append({"rel_noise": float(rel), "D": level, "reg": reg, "error": err, "J_sq": Jsq})
        logger.info("noise %.1e: D=%.3e error=%.3e", rel, level, err)
    return out
