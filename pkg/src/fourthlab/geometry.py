"""
Tensor-product space-time meshes and the subdomain masks used by both problems.

Node coordinates along an axis are ``anchor + spacing * (i + offset)``. Padding a
grid only changes ``offset`` and the node count, so the nodes of the original box
are reproduced bit-for-bit inside the enlarged grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

MIN_NODES = 8

Box = Sequence[Sequence[float]]


@dataclass(frozen=True)
class Face:
    """One face of the box domain: ``axis`` and ``side`` ('low' or 'high')."""

    axis: int
    side: str

    def __post_init__(self):
        if self.side not in ("low", "high"):
            raise ValueError(f"face side must be 'low' or 'high', got {self.side!r}")
        if self.axis < 0:
            raise ValueError("face axis must be non-negative")

    @property
    def sign(self) -> int:
        """Sign of the outward normal along ``axis``."""
        return -1 if self.side == "low" else 1


@dataclass(frozen=True)
class Grid:
    dim: int
    nodes: tuple[int, ...]
    anchors: tuple[float, ...]
    spacing: tuple[float, ...]
    offsets: tuple[int, ...]
    T: float
    Nt: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.nodes

    @property
    def size(self) -> int:
        return int(np.prod(self.nodes))

    @property
    def dt(self) -> float:
        return self.T / self.Nt

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.Nt + 1)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def coords(self, axis: int) -> np.ndarray:
        n = self.nodes[axis]
        return self.anchors[axis] + self.spacing[axis] * (np.arange(n) + self.offsets[axis])

    @property
    def extents(self) -> tuple[tuple[float, float], ...]:
        return tuple((float(self.coords(a)[0]), float(self.coords(a)[-1])) for a in range(self.dim))

    def mesh(self) -> tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*[self.coords(a) for a in range(self.dim)], indexing="ij"))

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        for a in range(self.dim):
            idx = [slice(None)] * self.dim
            idx[a] = 0
            mask[tuple(idx)] = True
            idx[a] = -1
            mask[tuple(idx)] = True
        return mask

    def interior_mask(self) -> np.ndarray:
        return ~self.boundary_mask()

    def face_mask(self, face: Face) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        idx = [slice(None)] * self.dim
        idx[face.axis] = 0 if face.side == "low" else -1
        mask[tuple(idx)] = True
        return mask

    def corner_mask(self) -> np.ndarray:
        """Nodes lying on two or more faces (empty in 1D)."""
        count = np.zeros(self.shape, dtype=int)
        for a in range(self.dim):
            for side in ("low", "high"):
                count += self.face_mask(Face(a, side))
        return count >= 2

    def distance_to_boundary(self) -> np.ndarray:
        """Index distance of every node to the nearest face."""
        dist = np.full(self.shape, np.iinfo(np.int64).max, dtype=np.int64)
        for a in range(self.dim):
            n = self.nodes[a]
            i = np.arange(n)
            d = np.minimum(i, n - 1 - i)
            shape = [1] * self.dim
            shape[a] = n
            dist = np.minimum(dist, d.reshape(shape))
        return dist

    def box_mask(self, box: Box, closed: bool = False) -> np.ndarray:
        """Nodes inside the coordinate box (open by default)."""
        if len(box) != self.dim:
            raise ValueError(f"box has {len(box)} axes, grid has {self.dim}")
        mask = np.ones(self.shape, dtype=bool)
        for a, (lo, hi) in enumerate(box):
            x = self.coords(a)
            eps = 1e-9 * self.spacing[a]
            if closed:
                inside = (x >= lo - eps) & (x <= hi + eps)
            else:
                inside = (x > lo + eps) & (x < hi - eps)
            shape = [1] * self.dim
            shape[a] = self.nodes[a]
            mask &= inside.reshape(shape)
        return mask

    def time_index(self, t: float) -> int:
        """Index of the time level nearest to ``t``."""
        return int(np.clip(round(t / self.dt), 0, self.Nt))

    def subgrid(self, slices: tuple[slice, ...]) -> "Grid":
        nodes, offsets = [], []
        for a, sl in enumerate(slices):
            start, stop, _ = sl.indices(self.nodes[a])
            nodes.append(stop - start)
            offsets.append(self.offsets[a] + start)
        return Grid(self.dim, tuple(nodes), self.anchors, self.spacing, tuple(offsets), self.T, self.Nt)


def build_grid(dim: int, extents: Box, nodes: Sequence[int], T: float, Nt: int) -> Grid:
    """Uniform tensor grid on the box ``extents`` with ``Nt`` time steps on [0, T]."""
    if dim not in (1, 2):
        raise ValueError(f"dim must be 1 or 2, got {dim}")
    if len(extents) != dim or len(nodes) != dim:
        raise ValueError("extents and nodes must have one entry per axis")
    for a in range(dim):
        lo, hi = extents[a]
        if not hi > lo:
            raise ValueError(f"axis {a}: extent must be positive, got ({lo}, {hi})")
        if int(nodes[a]) < MIN_NODES:
            raise ValueError(f"axis {a}: need at least {MIN_NODES} nodes, got {nodes[a]}")
    if not T > 0:
        raise ValueError(f"T must be positive, got {T}")
    if int(Nt) < MIN_NODES:
        raise ValueError(f"Nt must be at least {MIN_NODES}, got {Nt}")
    spacing = tuple((float(hi) - float(lo)) / (int(n) - 1) for (lo, hi), n in zip(extents, nodes))
    return Grid(
        dim=dim,
        nodes=tuple(int(n) for n in nodes),
        anchors=tuple(float(lo) for lo, _ in extents),
        spacing=spacing,
        offsets=(0,) * dim,
        T=float(T),
        Nt=int(Nt),
    )


@dataclass(frozen=True)
class SubdomainMasks:
    """Boolean node masks for one problem geometry.

    ``domain`` marks the closed Ω inside the working grid; for the inverse source it is the
    whole grid, after ``extend_domain`` it is the original block. ``omega1`` is
    ``None`` unless the grid is an enlarged domain.
    """

    omega: np.ndarray
    omega0: Optional[np.ndarray]
    gamma: Optional[np.ndarray]
    domain: np.ndarray
    omega1: Optional[np.ndarray] = None
    gamma_face: Optional[Face] = None
    domain_slices: Optional[tuple[slice, ...]] = None
    omega0_interior_margin: int = 2
    omega_box: Optional[tuple[tuple[float, float], ...]] = field(default=None)

    def restrict(self, values: np.ndarray) -> np.ndarray:
        """Restrict an enlarged-grid array (trailing spatial axes) to the Ω block."""
        if self.domain_slices is None:
            return values
        lead = (slice(None),) * (values.ndim - len(self.domain_slices))
        return values[lead + self.domain_slices]


def _face_of_box(box: Box, grid: Grid) -> list[tuple[Face, bool]]:
    """For each face of the grid, whether the closed box touches it."""
    out = []
    ext = grid.extents
    for a, (lo, hi) in enumerate(box):
        tol = 1e-9 * grid.spacing[a]
        out.append((Face(a, "low"), lo <= ext[a][0] + tol))
        out.append((Face(a, "high"), hi >= ext[a][1] - tol))
    return out


def _check_inside(box: Box, grid: Grid, name: str) -> None:
    ext = grid.extents
    for a, (lo, hi) in enumerate(box):
        tol = 1e-9 * grid.spacing[a]
        if not hi > lo:
            raise ValueError(f"{name}: empty interval on axis {a}: ({lo}, {hi})")
        if lo < ext[a][0] - tol or hi > ext[a][1] + tol:
            raise ValueError(f"{name}: box {list(box)} leaves the domain {list(ext)}")


def _omega0_mask(grid: Grid, omega0: Box, gamma: Optional[Face], gamma_mask: Optional[np.ndarray]) -> np.ndarray:
    _check_inside(omega0, grid, "Omega0")
    for face, touches in _face_of_box(omega0, grid):
        if touches and face != gamma:
            raise ValueError(
                f"closure of Omega0 {list(omega0)} meets the face (axis={face.axis}, side={face.side}),"
                " which is not part of Gamma"
            )
    mask = grid.box_mask(omega0)
    if not mask.any():
        raise ValueError(f"Omega0 {list(omega0)} contains no grid node")
    # discrete closure check: each node is interior or within one spacing of Gamma
    interior = grid.interior_mask()
    near_gamma = np.zeros(grid.shape, dtype=bool)
    if gamma_mask is not None and gamma_mask.any():
        near_gamma = _dilate(gamma_mask, 1)
    bad = mask & ~(interior | near_gamma)
    if bad.any():
        raise ValueError(f"Omega0 nodes outside Omega u Gamma: {np.argwhere(bad).tolist()}")
    return mask


def _dilate(mask: np.ndarray, width: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(width):
        grown = out.copy()
        for a in range(mask.ndim):
            grown[tuple(slice(1, None) if b == a else slice(None) for b in range(mask.ndim))] |= out[
                tuple(slice(None, -1) if b == a else slice(None) for b in range(mask.ndim))
            ]
            grown[tuple(slice(None, -1) if b == a else slice(None) for b in range(mask.ndim))] |= out[
                tuple(slice(1, None) if b == a else slice(None) for b in range(mask.ndim))
            ]
        out = grown
    return out


def build_subdomains(
    grid: Grid,
    omega: Box,
    omega0: Optional[Box] = None,
    gamma: Optional[Face] = None,
    margin: int = 2,
) -> SubdomainMasks:
    """Masks for ω (strictly interior), an optional target Ω₀ and boundary face Γ."""
    _check_inside(omega, grid, "omega")
    for face, touches in _face_of_box(omega, grid):
        if touches:
            raise ValueError(f"omega {list(omega)} touches the boundary face (axis={face.axis}, side={face.side})")
    omega_mask = grid.box_mask(omega)
    if not omega_mask.any():
        raise ValueError(f"omega {list(omega)} contains no grid node")
    if (omega_mask & grid.boundary_mask()).any():
        raise ValueError("omega contains boundary nodes")

    gamma_mask = None
    if gamma is not None:
        if gamma.axis >= grid.dim:
            raise ValueError(f"Gamma axis {gamma.axis} out of range for dim {grid.dim}")
        gamma_mask = grid.face_mask(gamma)
    omega0_mask = None
    if omega0 is not None:
        omega0_mask = _omega0_mask(grid, omega0, gamma, gamma_mask)

    return SubdomainMasks(
        omega=omega_mask,
        omega0=omega0_mask,
        gamma=gamma_mask,
        domain=np.ones(grid.shape, dtype=bool),
        gamma_face=gamma,
        omega0_interior_margin=margin,
        omega_box=tuple((float(lo), float(hi)) for lo, hi in omega),
    )


def canonical_control_box(grid: Grid, gamma: Face, pad: float) -> tuple[tuple[float, float], ...]:
    """The control region placed in the padding: 20%..80% of the pad depth, middle 60% tangentially."""
    box = []
    ext = grid.extents
    for a in range(grid.dim):
        lo, hi = ext[a]
        if a == gamma.axis:
            if gamma.side == "low":
                box.append((lo - 0.8 * pad, lo - 0.2 * pad))
            else:
                box.append((hi + 0.2 * pad, hi + 0.8 * pad))
        else:
            length = hi - lo
            box.append((lo + 0.2 * length, hi - 0.2 * length))
    return tuple(box)


def extend_domain(
    grid: Grid,
    gamma: Face,
    pad: float,
    omega0: Optional[Box] = None,
    margin: int = 2,
) -> tuple[Grid, SubdomainMasks]:
    """Pad the box across the face Γ, giving the enlarged domain Ω₁ and its masks."""
    if gamma.axis >= grid.dim:
        raise ValueError(f"Gamma axis {gamma.axis} out of range for dim {grid.dim}")
    h = grid.spacing[gamma.axis]
    if pad < 2 * h - 1e-12 * h:
        raise ValueError(f"pad {pad} is smaller than two node spacings ({2 * h}); the cutoff band needs room")
    n_pad = int(round(pad / h))

    nodes = list(grid.nodes)
    offsets = list(grid.offsets)
    nodes[gamma.axis] += n_pad
    slices = [slice(0, n) for n in grid.nodes]
    if gamma.side == "low":
        offsets[gamma.axis] -= n_pad
        slices[gamma.axis] = slice(n_pad, n_pad + grid.nodes[gamma.axis])
    big = Grid(grid.dim, tuple(nodes), grid.anchors, grid.spacing, tuple(offsets), grid.T, grid.Nt)
    slices = tuple(slices)

    domain = np.zeros(big.shape, dtype=bool)
    domain[slices] = True
    outer = big.boundary_mask()
    face_in_small = np.zeros(grid.shape, dtype=bool)
    face_in_small[grid.face_mask(gamma)] = True
    gamma_mask = np.zeros(big.shape, dtype=bool)
    gamma_mask[slices] = face_in_small
    gamma_mask &= ~outer

    omega_box = canonical_control_box(grid, gamma, n_pad * h)
    omega_mask = big.box_mask(omega_box)
    if not omega_mask.any():
        raise ValueError("padding too thin to hold a control region")

    omega0_mask = None
    if omega0 is not None:
        small0 = _omega0_mask(grid, omega0, gamma, grid.face_mask(gamma))
        omega0_mask = np.zeros(big.shape, dtype=bool)
        omega0_mask[slices] = small0

    return big, SubdomainMasks(
        omega=omega_mask,
        omega0=omega0_mask,
        gamma=gamma_mask,
        domain=domain,
        omega1=np.ones(big.shape, dtype=bool),
        gamma_face=gamma,
        domain_slices=slices,
        omega0_interior_margin=margin,
        omega_box=omega_box,
    )


OUTER_BOUNDARY, GAMMA, OMEGA_INTERIOR, PAD_INTERIOR = range(4)


def partition_labels(grid: Grid, masks: SubdomainMasks) -> np.ndarray:
    """Label every node of an enlarged grid as ∂Ω₁, Γ, Ω interior or Ω₁∖Ω̄ interior."""
    labels = np.full(grid.shape, -1, dtype=int)
    outer = grid.boundary_mask()
    labels[outer] = OUTER_BOUNDARY
    gamma = masks.gamma if masks.gamma is not None else np.zeros(grid.shape, dtype=bool)
    labels[gamma & ~outer] = GAMMA
    labels[masks.domain & ~outer & ~gamma] = OMEGA_INTERIOR
    labels[~masks.domain & ~outer] = PAD_INTERIOR
    return labels
