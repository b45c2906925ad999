"""
Singular Carleman weights, level thresholds and the α-level cutoff.

    h(t) = ((t - (t0 - τ)) (t0 + τ - t))^(-1/2)
    α    = h(t) (e^{λ d(x)} - e^{2 λ max d})
    φ    = h(t) e^{λ d(x)}

Everything that multiplies e^{2sα} is evaluated in log space.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .geometry import Grid, SubdomainMasks
from .operators import operators_for

logger = logging.getLogger(__name__)


def _profile_exponent(eta_c: float) -> tuple[float, int]:
    """Mixing weight a and power p with a*eta_c + (1-a)*eta_c**p = 1/2."""
    if abs(eta_c - 0.5) < 1e-12:
        return 1.0, 2
    p = 2
    while eta_c**p > 0.25:
        p += 1
    a = (0.5 - eta_c**p) / (eta_c - eta_c**p)
    return a, p


def _axis_profile(xi: np.ndarray, xi_c: float) -> np.ndarray:
    """4 q (1 - q) with q monotone in xi, q = 1/2 exactly at xi_c: a bump with its only critical point at xi_c."""
    if xi_c <= 0.5:
        eta, eta_c = 1.0 - xi, 1.0 - xi_c
    else:
        eta, eta_c = xi, xi_c
    a, p = _profile_exponent(eta_c)
    q = a * eta + (1.0 - a) * eta**p
    return 4.0 * q * (1.0 - q)


def build_distance_fn(grid: Grid, masks: SubdomainMasks, check: bool = True) -> np.ndarray:
    """Polynomial bump d ≥ 0 vanishing on the outer boundary, peaked inside ω.

    d is a product of one-dimensional profiles, each monotone on either side of
    the centre of ω, so |∇d| > 0 away from that centre (box corners excepted,
    where every C¹ function vanishing on both faces is stationary).
    """
    if masks.omega_box is not None:
        centre = [0.5 * (lo + hi) for lo, hi in masks.omega_box]
    else:
        pts = [c[masks.omega] for c in grid.mesh()]
        centre = [0.5 * (p.min() + p.max()) for p in pts]
    d = np.ones(grid.shape)
    for a in range(grid.dim):
        lo, hi = grid.extents[a]
        xi = (grid.coords(a) - lo) / (hi - lo)
        xi_c = (centre[a] - lo) / (hi - lo)
        if not 0.0 < xi_c < 1.0:
            raise ValueError(f"control region centre {centre} lies outside the working domain")
        prof = _axis_profile(xi, xi_c)
        shape = [1] * grid.dim
        shape[a] = grid.nodes[a]
        d = d * prof.reshape(shape)
    d[grid.boundary_mask()] = 0.0
    if check:
        check_distance_fn(d, grid, masks)
    return d


def distance_gradient_norm(d: np.ndarray, grid: Grid) -> np.ndarray:
    ops = operators_for(grid)
    sq = np.zeros(grid.shape)
    for a in range(grid.dim):
        beta = [0] * grid.dim
        beta[a] = 1
        sq += ops.derivative(beta)(d) ** 2
    return np.sqrt(sq)


def check_distance_fn(d: np.ndarray, grid: Grid, masks: SubdomainMasks, rel_tol: float = 1e-10) -> None:
    """Discrete checks: d = 0 on the outer boundary, d > 0 inside, |∇d| > 0 outside ω."""
    bnd = grid.boundary_mask()
    if np.any(d[bnd] != 0.0):
        raise ValueError("d does not vanish on the outer boundary")
    if np.any(d[~bnd] <= 0.0):
        raise ValueError(f"d is not positive at interior nodes {np.argwhere((d <= 0) & ~bnd).tolist()}")
    grad = distance_gradient_norm(d, grid)
    tol = rel_tol * float(np.max(grad))
    suspect = ~masks.omega & ~grid.corner_mask() & (grad <= tol)
    if suspect.any():
        raise ValueError(f"|grad d| vanishes outside omega at nodes {np.argwhere(suspect).tolist()}")


@dataclass(frozen=True)
class WeightParams:
    lam: float
    s: float
    t0: float
    tau: float
    d: np.ndarray
    d_max: float
    d_min: float

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if not self.s > 0:
            raise ValueError(f"s must be positive, got {self.s}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    @classmethod
    def from_distance(cls, d: np.ndarray, lam: float, s: float, t0: float, tau: float) -> "WeightParams":
        return cls(lam, s, t0, tau, np.asarray(d, dtype=float), float(np.max(d)), float(np.min(d)))

    def check_window(self, T: float) -> None:
        if not (self.t0 - self.tau >= 0.0 and self.t0 + self.tau <= T):
            raise ValueError(f"window ({self.t0 - self.tau}, {self.t0 + self.tau}) is not inside (0, {T})")

    def with_(self, **kw) -> "WeightParams":
        return replace(self, **kw)

    @property
    def e_top(self) -> float:
        """e^{2 λ max d}."""
        return float(np.exp(2.0 * self.lam * self.d_max))

    def h(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        u = t - self.t0
        # (τ − u)(τ + u) rather than the shifted endpoints, so that h(t0) = 1/τ to the last bit
        prod = (self.tau - u) * (self.tau + u)
        with np.errstate(divide="ignore"):
            return np.where(prod > 0, 1.0 / np.sqrt(np.where(prod > 0, prod, 1.0)), np.inf)

    def dh(self, t) -> np.ndarray:
        """h'(t) = h³ (t − t0)."""
        t = np.asarray(t, dtype=float)
        return self.h(t) ** 3 * (t - self.t0)

    def in_window(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return (t > self.t0 - self.tau) & (t < self.t0 + self.tau)

    def spatial_gap(self) -> np.ndarray:
        """e^{λd} − e^{2λ max d} (negative everywhere)."""
        return np.exp(self.lam * self.d) - self.e_top

    def alpha(self, t) -> np.ndarray:
        """α on (len(t), *d.shape); −∞ outside the open window."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        hh = self.h(t).reshape((-1,) + (1,) * self.d.ndim)
        gap = self.spatial_gap()
        return np.where(np.isfinite(hh), hh * gap, -np.inf)

    def log_phi(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        hh = self.h(t).reshape((-1,) + (1,) * self.d.ndim)
        return np.log(hh) + self.lam * self.d

    def dalpha_dt(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return self.dh(t).reshape((-1,) + (1,) * self.d.ndim) * self.spatial_gap()


def eval_weights(params: WeightParams, t: float, nodes=None) -> tuple[np.ndarray, np.ndarray, float]:
    """(α, φ, h) at time t for the given nodes (all nodes by default)."""
    if not (params.t0 - params.tau < t < params.t0 + params.tau):
        raise ValueError(f"t = {t} is outside the open window ({params.t0 - params.tau}, {params.t0 + params.tau})")
    hh = float(params.h(t))
    gap = params.spatial_gap()
    phi = hh * np.exp(params.lam * params.d)
    alpha = hh * gap
    if nodes is not None:
        alpha = alpha.ravel()[nodes]
        phi = phi.ravel()[nodes]
    return alpha, phi, hh


@dataclass(frozen=True)
class LevelThresholds:
    lam: float
    tau: float
    delta1: float
    deltaN: dict
    delta_floor: float

    @property
    def delta0(self) -> float:
        return self.deltaN[4] - self.deltaN[3]

    def ordered(self) -> bool:
        return self.delta1 < self.deltaN[2] < self.deltaN[3] < self.deltaN[4]


def threshold_values(lam: float, tau: float, d_max: float, delta_floor: float) -> LevelThresholds:
    e_top = np.exp(2.0 * lam * d_max)
    delta1 = (1.0 - e_top) / tau
    deltaN = {
        n: float(n / np.sqrt(n * n - 1.0) / tau * (np.exp(lam * delta_floor) - e_top)) for n in (2, 3, 4)
    }
    return LevelThresholds(lam, tau, float(delta1), deltaN, float(delta_floor))


def omega0_floor(params: WeightParams, masks: SubdomainMasks) -> float:
    """min of d over the closure of Ω₀ (Ω₀ nodes plus their grid neighbours)."""
    if masks.omega0 is None:
        raise ValueError("masks carry no Omega0")
    from .geometry import _dilate

    closure = _dilate(masks.omega0, 1)
    return float(np.min(params.d[closure]))


def dalpha_constant(params: WeightParams, times: np.ndarray, power: int = 2) -> float:
    """max |∂ₜα| / φ^power over the given time levels inside the open window."""
    times = np.asarray(times, dtype=float)
    times = times[params.in_window(times)]
    if times.size == 0:
        return 0.0
    dh = np.abs(params.dh(times)).reshape((-1,) + (1,) * params.d.ndim)
    with np.errstate(divide="ignore"):
        log_num = np.log(dh) + np.log(-params.spatial_gap())
    ratio = np.exp(log_num - power * params.log_phi(times))
    return float(np.max(ratio))


def compute_thresholds(
    params: WeightParams,
    masks: SubdomainMasks,
    lam_sweep: Optional[Sequence[float]] = None,
    delta_floor: Optional[float] = None,
    times: Optional[np.ndarray] = None,
    dalpha_ceiling: float = np.inf,
) -> LevelThresholds:
    """δ₁ and δ(N), N = 2, 3, 4, at the smallest λ of the sweep giving δ₁ < δ(2) < δ(3) < δ(4).

    ``params.lam`` is tried first when no sweep is given. With ``times`` the
    empirical constant max|∂ₜα|/φ² must also stay below ``dalpha_ceiling``.
    """
    floor = omega0_floor(params, masks) if delta_floor is None else float(delta_floor)
    if masks.omega0 is not None and delta_floor is not None:
        actual = omega0_floor(params, masks)
        if actual < floor - 1e-12:
            raise ValueError(f"d drops to {actual} on closure(Omega0), below the margin {floor}")
    candidates = [params.lam] if lam_sweep is None else list(lam_sweep)
    tried = []
    for lam in candidates:
        th = threshold_values(lam, params.tau, params.d_max, floor)
        const = np.nan
        if times is not None:
            const = dalpha_constant(params.with_(lam=lam), times)
        ok = th.ordered() and (times is None or const <= dalpha_ceiling)
        tried.append((lam, th.delta1, th.deltaN[2], th.deltaN[3], th.deltaN[4], const))
        if ok:
            logger.info("thresholds ordered at lambda=%g", lam)
            return th
    lines = "\n".join(
        f"  lambda={lam:g}: delta1={d1:.6g} delta(2)={d2:.6g} delta(3)={d3:.6g} delta(4)={d4:.6g} C_dt={c:.4g}"
        for lam, d1, d2, d3, d4, c in tried
    )
    raise ValueError(
        f"no lambda in the sweep orders delta1 < delta(2) < delta(3) < delta(4) (delta_floor={floor:g},"
        f" d_max={params.d_max:g}):\n{lines}"
    )


def geometric_sweep(lam_min: float, lam_cap: float) -> list[float]:
    out, lam = [], float(lam_min)
    while lam <= lam_cap * (1 + 1e-12):
        out.append(lam)
        lam *= 2.0
    return out


_RAMP = np.array([70.0, -315.0, 540.0, -420.0, 126.0, 0.0, 0.0, 0.0, 0.0, 0.0])


def ramp(x, deriv: int = 0) -> np.ndarray:
    """C⁴ step from 0 to 1 on [0, 1]: x⁵(126 − 420x + 540x² − 315x³ + 70x⁴), with ramp(1/2) = 1/2."""
    x = np.asarray(x, dtype=float)
    poly = np.poly1d(_RAMP)
    for _ in range(deriv):
        poly = poly.deriv()
    inside = poly(np.clip(x, 0.0, 1.0))
    if deriv == 0:
        return np.where(x <= 0, 0.0, np.where(x >= 1, 1.0, inside))
    return np.where((x <= 0) | (x >= 1), 0.0, inside)


def build_cutoff(params: WeightParams, thresholds: LevelThresholds, times: np.ndarray) -> np.ndarray:
    """χ = ramp((α − δ(2)) / (δ(3) − δ(2))): 0 where α ≤ δ(2), 1 where α ≥ δ(3)."""
    lo, hi = thresholds.deltaN[2], thresholds.deltaN[3]
    if not hi > lo:
        raise ValueError("empty transition band: delta(2) >= delta(3)")
    alpha = params.alpha(times)
    return ramp((alpha - lo) / (hi - lo))


def cutoff_dt(params: WeightParams, thresholds: LevelThresholds, times: np.ndarray) -> np.ndarray:
    """∂ₜχ by the chain rule."""
    lo, hi = thresholds.deltaN[2], thresholds.deltaN[3]
    alpha = params.alpha(times)
    with np.errstate(invalid="ignore"):
        out = ramp((alpha - lo) / (hi - lo), 1) / (hi - lo) * params.dalpha_dt(times)
    return np.nan_to_num(out)


@dataclass
class WeightBoundsReport:
    s_values: list
    s7_max: list
    dalpha_phi2: float
    dalpha_phi3: float
    lam: float
    log_s7_max: list = None

    def s7_non_increasing(self) -> bool:
        """Compared in log space: the maxima underflow to 0 for moderate s."""
        logs = self.log_s7_max if self.log_s7_max is not None else [np.log(v) for v in self.s7_max]
        return all(b <= a + 1e-12 * abs(a) for a, b in zip(logs, logs[1:]))


def log_s7_weight_max(params: WeightParams, times: np.ndarray, s: float) -> float:
    """log of max over the grid of s⁷φ⁷e^{2sα}."""
    times = np.asarray(times, dtype=float)
    times = times[params.in_window(times)]
    log_val = 7.0 * (np.log(s) + params.log_phi(times)) + 2.0 * s * params.alpha(times)
    return float(np.max(log_val))


def s7_weight_max(params: WeightParams, times: np.ndarray, s: float) -> float:
    return float(np.exp(log_s7_weight_max(params, times, s)))


def check_weight_bounds(params: WeightParams, times: np.ndarray, s_values: Sequence[float]) -> WeightBoundsReport:
    """Boundedness of s⁷φ⁷e^{2sα} across s, plus the empirical constants of |∂ₜα| ≤ Cφ^k."""
    logs = [log_s7_weight_max(params, times, s) for s in s_values]
    return WeightBoundsReport(
        s_values=list(s_values),
        s7_max=[float(np.exp(v)) for v in logs],
        dalpha_phi2=dalpha_constant(params, times, 2),
        dalpha_phi3=dalpha_constant(params, times, 3),
        lam=params.lam,
        log_s7_max=logs,
    )
