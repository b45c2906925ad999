"""
Finite-difference operators on tensor grids.

All stencils are second-order accurate: centered in the interior, shifted
one-sided windows near the faces. Fields are arrays of shape ``grid.shape``
(spatial) or ``(levels, *grid.shape)`` (space-time); sparse operators act on the
C-order flattening of the spatial axes.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .geometry import Face, Grid

MAX_ORDER = 4
# D contains ||u||_{H^1(0,T;H^mu(Gamma))}; the surrogate uses plain L2(Gamma)
TRACE_TIME_MU = 0


def fd_weights(offsets: Sequence[int], order: int) -> np.ndarray:
    """Weights w with sum_k w_k f(x + o_k h) ~ h**order * f^(order)(x)."""
    offsets = np.asarray(offsets, dtype=float)
    m = len(offsets)
    vander = np.vander(offsets, m, increasing=True).T
    rhs = np.zeros(m)
    rhs[order] = math.factorial(order)
    return np.linalg.solve(vander, rhs)


@lru_cache(maxsize=256)
def derivative_matrix_1d(n: int, h: float, order: int) -> sp.csr_matrix:
    """Second-order accurate ``order``-th derivative on ``n`` uniform nodes."""
    if order == 0:
        return sp.identity(n, format="csr")
    if not 1 <= order <= MAX_ORDER:
        raise ValueError(f"derivative order must be in 0..{MAX_ORDER}, got {order}")
    centered = order + 1 if order % 2 == 0 else order + 2
    one_sided = order + 2
    if n < one_sided:
        raise ValueError(f"{n} nodes cannot carry a derivative of order {order}")
    half = centered // 2
    rows, cols, vals = [], [], []
    for i in range(n):
        if i - half >= 0 and i + half <= n - 1:
            start, width = i - half, centered
        else:
            width = one_sided
            start = min(max(i - width // 2, 0), n - width)
        offs = np.arange(start, start + width) - i
        w = fd_weights(offs, order) / h**order
        rows.extend([i] * width)
        cols.extend(range(start, start + width))
        vals.extend(w)
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    mat.eliminate_zeros()
    return mat


@lru_cache(maxsize=128)
def reflected_derivative_matrix_1d(n: int, h: float, order: int) -> sp.csr_matrix:
    """Centered ``order``-th derivative with ghost values from odd reflection across both ends.

    Odd reflection is the extension compatible with y = Δy = 0, so for
    Navier fields every stencil stays centered and acts diagonally on sine modes.
    """
    if order == 0:
        return sp.identity(n, format="csr")
    if not 1 <= order <= MAX_ORDER:
        raise ValueError(f"derivative order must be in 0..{MAX_ORDER}, got {order}")
    width = order + 1 if order % 2 == 0 else order + 2
    half = width // 2
    w = fd_weights(np.arange(-half, half + 1), order) / h**order
    mat = sp.lil_matrix((n, n))
    last = n - 1
    for i in range(n):
        for off, c in zip(range(-half, half + 1), w):
            j = i + off
            sign = 1.0
            if j < 0:
                j, sign = -j, -1.0
            elif j > last:
                j, sign = 2 * last - j, -1.0
            if 0 < j < last:
                mat[i, j] += sign * c
    return sp.csr_matrix(mat)


def navier_sobolev_factors(grid: Grid, k: int) -> list[sp.csr_matrix]:
    """Reflected derivative matrices D_β, |β| ≤ k; the H^k Gram is Σ D_βᵀ W D_β.

    Keep the factors: the assembled Gram has entries of size h^{-2k} and loses
    most significant digits to cancellation when applied.
    """
    if not 0 <= k <= MAX_ORDER:
        raise ValueError(f"Sobolev order must be in 0..{MAX_ORDER}, got {k}")
    out = []
    for beta in multi_indices(grid.dim, k):
        mats = [reflected_derivative_matrix_1d(grid.nodes[a], grid.spacing[a], beta[a]) for a in range(grid.dim)]
        out.append(_kron_axis(grid, mats))
    return out


def navier_sobolev_norm(field_: np.ndarray, grid: Grid, k: int) -> float:
    """Discrete H^k norm of a field with y = Δy = 0 on ∂Ω, using odd reflection at the faces."""
    _check_field(field_, grid)
    v = np.asarray(field_, dtype=float).ravel()
    w = quadrature_weights(grid).ravel()
    return float(np.sqrt(sum(np.sum(w * (D @ v) ** 2) for D in navier_sobolev_factors(grid, k))))


@lru_cache(maxsize=64)
def dirichlet_laplacian_1d(n: int, h: float) -> sp.csr_matrix:
    """Three-point second difference acting on interior nodes; boundary rows and columns are zero."""
    main = np.full(n, -2.0)
    off = np.ones(n - 1)
    mat = sp.diags([off, main, off], [-1, 0, 1], format="lil") / h**2
    mat[0, :] = 0
    mat[-1, :] = 0
    mat[:, 0] = 0
    mat[:, -1] = 0
    return sp.csr_matrix(mat)


def multi_indices(dim: int, max_order: int, min_order: int = 0) -> list[tuple[int, ...]]:
    out = []
    for k in range(min_order, max_order + 1):
        for beta in itertools.product(range(k + 1), repeat=dim):
            if sum(beta) == k:
                out.append(tuple(beta))
    return out


def _kron_axis(grid: Grid, mats: Sequence[sp.spmatrix]) -> sp.csr_matrix:
    out = mats[0]
    for m in mats[1:]:
        out = sp.kron(out, m, format="csr")
    return sp.csr_matrix(out)


@dataclass(frozen=True)
class DiscreteOperator:
    """A sparse linear map on flattened grid fields."""

    matrix: sp.csr_matrix
    shape: tuple[int, ...]
    bc: str = "none"

    def __call__(self, values: np.ndarray) -> np.ndarray:
        lead = values.shape[: values.ndim - len(self.shape)]
        flat = values.reshape(lead + (-1,))
        out = (self.matrix @ flat.reshape(-1, flat.shape[-1]).T).T
        return out.reshape(values.shape)


class GridOperators:
    """Assembled operators for one grid; matrices are built lazily and cached."""

    def __init__(self, grid: Grid):
        self.grid = grid
        self._cache: dict = {}

    def derivative(self, beta: Sequence[int]) -> DiscreteOperator:
        beta = tuple(int(b) for b in beta)
        if len(beta) != self.grid.dim:
            raise ValueError(f"multi-index {beta} does not match dim {self.grid.dim}")
        key = ("d", beta)
        if key not in self._cache:
            mats = [derivative_matrix_1d(self.grid.nodes[a], self.grid.spacing[a], b) for a, b in enumerate(beta)]
            self._cache[key] = DiscreteOperator(_kron_axis(self.grid, mats), self.grid.shape)
        return self._cache[key]

    def _projector(self) -> sp.csr_matrix:
        key = ("interior",)
        if key not in self._cache:
            self._cache[key] = sp.diags(self.grid.interior_mask().ravel().astype(float), format="csr")
        return self._cache[key]

    def laplacian_navier(self) -> DiscreteOperator:
        """Dirichlet Laplacian: interior rows only, boundary values treated as zero."""
        key = ("lap_navier",)
        if key not in self._cache:
            g = self.grid
            total = None
            for a in range(g.dim):
                mats = [sp.identity(n, format="csr") for n in g.nodes]
                mats[a] = dirichlet_laplacian_1d(g.nodes[a], g.spacing[a])
                term = _kron_axis(g, mats)
                total = term if total is None else total + term
            proj = self._projector()
            self._cache[key] = DiscreteOperator(sp.csr_matrix(proj @ total @ proj), g.shape, "navier")
        return self._cache[key]

    def biharmonic_navier(self) -> DiscreteOperator:
        """Δ² as two Dirichlet Laplacians: the ghost values are odd reflections (y = Δy = 0)."""
        key = ("bih_navier",)
        if key not in self._cache:
            lap = self.laplacian_navier().matrix
            self._cache[key] = DiscreteOperator(sp.csr_matrix(lap @ lap), self.grid.shape, "navier")
        return self._cache[key]

    def laplacian(self) -> DiscreteOperator:
        key = ("lap",)
        if key not in self._cache:
            total = None
            for a in range(self.grid.dim):
                beta = [0] * self.grid.dim
                beta[a] = 2
                term = self.derivative(beta).matrix
                total = term if total is None else total + term
            self._cache[key] = DiscreteOperator(sp.csr_matrix(total), self.grid.shape)
        return self._cache[key]

    def biharmonic(self) -> DiscreteOperator:
        """Δ² with no boundary condition (one-sided stencils at the faces)."""
        key = ("bih",)
        if key not in self._cache:
            total = None
            for a in range(self.grid.dim):
                for b in range(self.grid.dim):
                    beta = [0] * self.grid.dim
                    beta[a] += 2
                    beta[b] += 2
                    term = self.derivative(beta).matrix
                    total = term if total is None else total + term
            self._cache[key] = DiscreteOperator(sp.csr_matrix(total), self.grid.shape)
        return self._cache[key]

    def lower_order(self, coeffs: "CoefficientSet") -> sp.csr_matrix:
        """Σ p_β ∂^β as one sparse matrix."""
        n = self.grid.size
        total = sp.csr_matrix((n, n))
        for beta, p in coeffs.terms.items():
            p = np.broadcast_to(np.asarray(p, dtype=float), self.grid.shape).ravel()
            if not np.any(p):
                continue
            total = total + sp.diags(p) @ self.derivative(beta).matrix
        return sp.csr_matrix(total)


_OPS_CACHE: dict[Grid, GridOperators] = {}


def operators_for(grid: Grid) -> GridOperators:
    ops = _OPS_CACHE.get(grid)
    if ops is None:
        ops = GridOperators(grid)
        _OPS_CACHE[grid] = ops
    return ops


@dataclass
class CoefficientSet:
    """Lower-order coefficients p_β (|β| ≤ 2) with the uniform bound M0."""

    grid: Grid
    terms: Mapping[tuple[int, ...], np.ndarray] = field(default_factory=dict)
    M0: float = 0.0

    def __post_init__(self):
        clean = {}
        for beta, p in self.terms.items():
            beta = tuple(int(b) for b in beta)
            if len(beta) != self.grid.dim:
                raise ValueError(f"multi-index {beta} does not match dim {self.grid.dim}")
            if sum(beta) > 2:
                raise ValueError(f"lower-order terms need |beta| <= 2, got {beta}")
            arr = np.broadcast_to(np.asarray(p, dtype=float), self.grid.shape).copy()
            sup = float(np.max(np.abs(arr))) if arr.size else 0.0
            if sup > self.M0 * (1 + 1e-12):
                raise ValueError(f"||p_{beta}||_inf = {sup} exceeds M0 = {self.M0}")
            clean[beta] = arr
        self.terms = clean

    @classmethod
    def zero(cls, grid: Grid) -> "CoefficientSet":
        return cls(grid, {}, 0.0)

    def scaled(self, factor: float) -> "CoefficientSet":
        return CoefficientSet(self.grid, {b: factor * p for b, p in self.terms.items()}, abs(factor) * self.M0)

    def restrict(self, grid: Grid, slices: tuple[slice, ...]) -> "CoefficientSet":
        return CoefficientSet(grid, {b: p[slices] for b, p in self.terms.items()}, self.M0)


def _check_field(field_: np.ndarray, grid: Grid) -> None:
    if tuple(field_.shape[-grid.dim :]) != grid.shape:
        raise ValueError(f"field shape {field_.shape} does not match grid {grid.shape}")


def apply_derivative(field_: np.ndarray, beta: Sequence[int], grid: Grid) -> np.ndarray:
    """∂^β of a spatial (or space-time) field, |β| ≤ 3."""
    if sum(beta) > 3:
        raise ValueError(f"|beta| must be at most 3, got {tuple(beta)}")
    _check_field(field_, grid)
    return operators_for(grid).derivative(beta)(np.asarray(field_, dtype=float))


def _navier_trace_error(field_: np.ndarray, grid: Grid) -> float:
    bnd = grid.boundary_mask()
    return float(np.max(np.abs(field_[..., bnd]))) if bnd.any() else 0.0


def apply_biharmonic_navier(field_: np.ndarray, grid: Grid, tol: float = 1e-12) -> np.ndarray:
    _check_field(field_, grid)
    field_ = np.asarray(field_, dtype=float)
    scale = max(1.0, float(np.max(np.abs(field_)))) if field_.size else 1.0
    err = _navier_trace_error(field_, grid)
    if err > tol * scale:
        raise ValueError(f"field does not vanish on the boundary (max |trace| = {err:.3e})")
    return operators_for(grid).biharmonic_navier()(field_)


def apply_P(
    y: np.ndarray,
    dt_y: np.ndarray,
    coeffs: CoefficientSet,
    grid: Grid,
    navier: bool = True,
) -> np.ndarray:
    """∂ₜy + Δ²y + Σ p_β ∂^β y, nodewise.

    With ``navier`` the biharmonic uses the simply-supported boundary closure
    and the result is zero on boundary nodes; otherwise one-sided stencils are
    used everywhere.
    """
    _check_field(y, grid)
    if np.shape(y) != np.shape(dt_y):
        raise ValueError("y and dt_y live on different grids")
    if coeffs.grid.shape != grid.shape:
        raise ValueError("coefficients belong to a different grid")
    ops = operators_for(grid)
    y = np.asarray(y, dtype=float)
    if navier:
        out = np.asarray(dt_y, dtype=float) + apply_biharmonic_navier(y, grid)
    else:
        out = np.asarray(dt_y, dtype=float) + ops.biharmonic()(y)
    lower = ops.lower_order(coeffs)
    if lower.nnz:
        out = out + DiscreteOperator(lower, grid.shape)(y)
    if navier:
        out[..., grid.boundary_mask()] = 0.0
    return out


def trapezoid_weights_1d(mask_1d: np.ndarray, h: float) -> np.ndarray:
    """Trapezoid weights on the runs of True in a 1D mask."""
    m = np.asarray(mask_1d, dtype=bool)
    left = np.zeros_like(m)
    right = np.zeros_like(m)
    left[1:] = m[:-1]
    right[:-1] = m[1:]
    return np.where(m, 0.5 * h * (left.astype(float) + right.astype(float)), 0.0)


def quadrature_weights(grid: Grid, region: Optional[np.ndarray] = None) -> np.ndarray:
    """Tensor trapezoid weights restricted to a box-shaped mask."""
    if region is None:
        region = np.ones(grid.shape, dtype=bool)
    w = np.ones(grid.shape)
    for a in range(grid.dim):
        # per-axis neighbour counting inside the region
        m = np.moveaxis(region, a, -1)
        left = np.zeros_like(m)
        right = np.zeros_like(m)
        left[..., 1:] = m[..., :-1]
        right[..., :-1] = m[..., 1:]
        factor = 0.5 * grid.spacing[a] * (left.astype(float) + right.astype(float))
        w = w * np.moveaxis(factor, -1, a)
    return np.where(region, w, 0.0)


def time_weights(n_levels: int, dt: float) -> np.ndarray:
    w = np.full(n_levels, dt)
    if n_levels == 1:
        return np.zeros(1)
    w[0] = w[-1] = 0.5 * dt
    return w


def sobolev_norm(field_: np.ndarray, grid: Grid, k: int, region: Optional[np.ndarray] = None) -> float:
    """Discrete H^k norm: sqrt of Σ_{|β|≤k} ||∂^β f||² over ``region`` (trapezoid)."""
    if not 0 <= k <= MAX_ORDER:
        raise ValueError(f"Sobolev order must be in 0..{MAX_ORDER}, got {k}")
    _check_field(field_, grid)
    return float(np.sqrt(_sobolev_sq(np.asarray(field_, dtype=float), grid, k, region)))


def _sobolev_sq(values: np.ndarray, grid: Grid, k: int, region: Optional[np.ndarray]) -> np.ndarray:
    """Squared H^k norm over the trailing spatial axes (vectorised over leading axes)."""
    ops = operators_for(grid)
    w = quadrature_weights(grid, region)
    axes = tuple(range(values.ndim - grid.dim, values.ndim))
    total = 0.0
    for beta in multi_indices(grid.dim, k):
        d = ops.derivative(beta)(values)
        total = total + np.sum(w * d * d, axis=axes)
    return total


def spacetime_norm(
    values: np.ndarray,
    grid: Grid,
    k: int = 0,
    region: Optional[np.ndarray] = None,
    time_order: int = 0,
    levels: Optional[Sequence[int]] = None,
) -> float:
    """L²(t-window; H^k(region)) or, with ``time_order=1``, H¹(t-window; H^k(region))."""
    if time_order not in (0, 1):
        raise ValueError("time_order must be 0 or 1")
    values = np.asarray(values, dtype=float)
    if levels is not None:
        values = values[np.asarray(levels)]
    wt = time_weights(values.shape[0], grid.dt)
    sq = _sobolev_sq(values, grid, k, region)
    total = float(np.sum(wt * sq))
    if time_order == 1:
        dvals = np.gradient(values, grid.dt, axis=0, edge_order=2) if values.shape[0] > 2 else np.diff(
            values, axis=0, prepend=values[:1]
        ) / grid.dt
        total += float(np.sum(wt * _sobolev_sq(dvals, grid, k, region)))
    return float(np.sqrt(total))


@dataclass(frozen=True)
class CauchyTrace:
    """Normal traces g_j = ∂_ν^j u, j = 0..3, on the closed face Γ for every time level.

    ``values`` has shape (4, Nt+1, n_gamma); ``n_gamma`` is 1 in 1D. In 2D the
    face nodes run along the tangential axis with spacing ``h_tan``.
    """

    values: np.ndarray
    dt: float
    face: Face
    h_tan: Optional[float] = None

    @property
    def n_levels(self) -> int:
        return self.values.shape[1]

    def __add__(self, other: "CauchyTrace") -> "CauchyTrace":
        return CauchyTrace(self.values + other.values, self.dt, self.face, self.h_tan)

    def scaled(self, factor: float) -> "CauchyTrace":
        return CauchyTrace(factor * self.values, self.dt, self.face, self.h_tan)

    @property
    def data_size(self) -> float:
        return cauchy_data_size(self)


def trace_order(j: int) -> int:
    """Integer surrogate ⌈7/2 − j⌉ of the fractional trace order."""
    if j not in (0, 1, 2, 3):
        raise ValueError(f"trace index j must be in 0..3, got {j}")
    return math.ceil(3.5 - j)


def _tangential_sq(g: np.ndarray, order: int, h_tan: Optional[float]) -> np.ndarray:
    """Squared tangential H^order norm of each row of g (shape (levels, n_gamma))."""
    n = g.shape[-1]
    if n == 1:
        return g[..., 0] ** 2
    w = trapezoid_weights_1d(np.ones(n, dtype=bool), h_tan)
    total = np.zeros(g.shape[0])
    for m in range(order + 1):
        d = (derivative_matrix_1d(n, h_tan, m) @ g.T).T
        total += np.sum(w * d * d, axis=-1)
    return total


def trace_norm_surrogate(trace: CauchyTrace, j: int) -> float:
    """L²(0,T; H^{⌈7/2−j⌉}(Γ)) of g_j; in 1D Γ is a point and this is L²(0,T) of g_j."""
    order = trace_order(j)
    g = trace.values[j]
    wt = time_weights(g.shape[0], trace.dt)
    return float(np.sqrt(np.sum(wt * _tangential_sq(g, order, trace.h_tan))))


def trace_time_norm(trace: CauchyTrace) -> float:
    """||g_0||_{H¹(0,T; L²(Γ))}."""
    g = trace.values[0]
    wt = time_weights(g.shape[0], trace.dt)
    dg = np.gradient(g, trace.dt, axis=0, edge_order=2)
    sq = _tangential_sq(g, TRACE_TIME_MU, trace.h_tan) + _tangential_sq(dg, TRACE_TIME_MU, trace.h_tan)
    return float(np.sqrt(np.sum(wt * sq)))


def cauchy_data_size(trace: CauchyTrace) -> float:
    return sum(trace_norm_surrogate(trace, j) for j in range(4)) + trace_time_norm(trace)


def normal_derivative_stencil(grid: Grid, face: Face, j: int) -> sp.csr_matrix:
    """Rows mapping a spatial field to ∂_ν^j at the nodes of the closed face (one-sided, 2nd order)."""
    ops = operators_for(grid)
    beta = [0] * grid.dim
    beta[face.axis] = j
    mat = ops.derivative(beta).matrix * (face.sign**j)
    rows = np.flatnonzero(grid.face_mask(face).ravel())
    return sp.csr_matrix(mat[rows])


def extract_cauchy(u: np.ndarray, grid: Grid, face: Face) -> CauchyTrace:
    """Sample g_j = ∂_ν^j u on the face for every time level of a space-time field."""
    u = np.asarray(u, dtype=float)
    flat = u.reshape(u.shape[0], -1)
    vals = np.stack([(normal_derivative_stencil(grid, face, j) @ flat.T).T for j in range(4)])
    h_tan = None
    if grid.dim == 2:
        h_tan = grid.spacing[1 - face.axis]
    return CauchyTrace(vals, grid.dt, face, h_tan)
