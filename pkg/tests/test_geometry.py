from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fourthlab.geometry import (
    GAMMA,
    OMEGA_INTERIOR,
    OUTER_BOUNDARY,
    PAD_INTERIOR,
    Face,
    build_grid,
    build_subdomains,
    extend_domain,
    partition_labels,
)


def test_uniform_1d_spacing():
    g = build_grid(1, [(0, 1)], [101], 1.0, 100)
    assert g.spacing[0] == pytest.approx(0.01, rel=1e-14)
    assert g.dt == pytest.approx(0.01, rel=1e-14)
    assert g.times.shape == (101,)


def test_square_boundary_count():
    g = build_grid(2, [(0, 1), (0, 1)], [33, 33], 1.0, 10)
    assert g.size == 33 * 33
    assert int(g.boundary_mask().sum()) == 4 * 32


@pytest.mark.parametrize("kwargs", [dict(nodes=[4]), dict(T=0.0), dict(Nt=2)])
def test_grid_rejects_bad_input(kwargs):
    args = dict(dim=1, extents=[(0, 1)], nodes=[101], T=1.0, Nt=100) | kwargs
    with pytest.raises(ValueError):
        build_grid(**args)


def test_control_region_1d():
    g = build_grid(1, [(0, 1)], [101], 1.0, 10)
    m = build_subdomains(g, [(0.4, 0.6)])
    assert 19 <= int(m.omega.sum()) <= 21
    assert not (m.omega & g.boundary_mask()).any()


def test_omega0_touching_gamma_accepted():
    g = build_grid(1, [(0, 1)], [101], 1.0, 10)
    m = build_subdomains(g, [(0.4, 0.6)], omega0=[(0.0, 0.5)], gamma=Face(0, "low"))
    # open box: nodes strictly between 0 and 0.5
    assert np.flatnonzero(m.omega0).tolist() == list(range(1, 50))


def test_omega0_touching_other_face_rejected():
    g = build_grid(1, [(0, 1)], [101], 1.0, 10)
    with pytest.raises(ValueError, match="not part of Gamma"):
        build_subdomains(g, [(0.4, 0.6)], omega0=[(0.2, 1.0)], gamma=Face(0, "low"))


def test_omega_must_be_interior():
    g = build_grid(1, [(0, 1)], [101], 1.0, 10)
    with pytest.raises(ValueError):
        build_subdomains(g, [(0.0, 0.3)])


def test_extend_domain_1d():
    g = build_grid(1, [(0, 1)], [101], 1.0, 10)
    big, m = extend_domain(g, Face(0, "low"), 0.5)
    assert big.extents[0] == pytest.approx((-0.5, 1.0))
    assert m.omega_box[0] == pytest.approx((-0.4, -0.1))
    x = big.coords(0)
    assert np.all((x[m.omega] > -0.5) & (x[m.omega] < 0.0))
    # Omega restriction reproduces the original nodes bit for bit
    np.testing.assert_array_equal(x[m.domain_slices], g.coords(0))


def test_extend_domain_2d():
    g = build_grid(2, [(0, 1), (0, 1)], [21, 21], 1.0, 10)
    big, m = extend_domain(g, Face(0, "low"), 0.5)
    assert big.extents[0] == pytest.approx((-0.5, 1.0))
    assert big.extents[1] == pytest.approx((0.0, 1.0))
    X, Y = big.mesh()
    assert np.all(X[m.omega] < 0) and np.all(X[m.omega] > -0.5)
    assert np.all((Y[m.omega] > 0) & (Y[m.omega] < 1))


def test_extend_domain_pad_too_thin():
    g = build_grid(1, [(0, 1)], [101], 1.0, 10)
    with pytest.raises(ValueError, match="pad"):
        extend_domain(g, Face(0, "low"), 0.005)


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(9, 40),
    pad_cells=st.integers(2, 20),
    side=st.sampled_from(["low", "high"]),
    dim=st.sampled_from([1, 2]),
)
def test_partition_and_monotone_padding(n, pad_cells, side, dim):
    g = build_grid(dim, [(0, 1)] * dim, [n] * dim, 1.0, 8)
    h = g.spacing[0]
    face = Face(0, side)
    big, m = extend_domain(g, face, pad_cells * h)
    labels = partition_labels(big, m)
    assert set(np.unique(labels)) <= {OUTER_BOUNDARY, GAMMA, OMEGA_INTERIOR, PAD_INTERIOR}
    assert (labels >= 0).all()
    # the Omega block is reproduced exactly
    for a in range(dim):
        coords = big.coords(a)
        np.testing.assert_array_equal(coords[m.domain_slices[a]], g.coords(a))
    bigger, _ = extend_domain(g, face, (pad_cells + 1) * h)
    assert bigger.size > big.size
    assert set(np.round(big.coords(0), 12)) <= set(np.round(bigger.coords(0), 12))
