from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fourthlab.geometry import Face, build_grid
from fourthlab.operators import (
    CauchyTrace,
    CoefficientSet,
    apply_biharmonic_navier,
    apply_derivative,
    apply_P,
    operators_for,
    sobolev_norm,
    trace_norm_surrogate,
)

PI = np.pi


def line(n):
    return build_grid(1, [(0, 1)], [n], 1.0, 8)


def test_second_derivative_exact_on_quadratic():
    g = line(41)
    x = g.coords(0)
    d2 = apply_derivative(x**2, (2,), g)
    np.testing.assert_allclose(d2, 2.0, rtol=0, atol=1e-9)


def test_first_derivative_second_order():
    errs = []
    for n in (41, 81, 161):
        g = line(n)
        x = g.coords(0)
        errs.append(np.max(np.abs(apply_derivative(np.sin(PI * x), (1,), g) - PI * np.cos(PI * x))))
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    assert all(3.5 < r < 4.5 for r in ratios)


@pytest.mark.parametrize("beta", [(1,), (2,), (3,)])
def test_derivative_of_constant(beta):
    g = line(21)
    np.testing.assert_allclose(apply_derivative(np.full(21, 3.7), beta, g), 0.0, atol=1e-9)


def test_derivative_order_limit():
    with pytest.raises(ValueError):
        apply_derivative(np.zeros(21), (4,), line(21))


@pytest.mark.parametrize("k", [1, 2])
def test_biharmonic_modes(k):
    errs = []
    for n in (41, 81):
        g = line(n)
        x = g.coords(0)
        u = np.sin(k * PI * x)
        u[[0, -1]] = 0.0
        out = apply_biharmonic_navier(u, g)
        errs.append(np.max(np.abs(out - (k * PI) ** 4 * u)) / (k * PI) ** 4)
    assert errs[1] < 0.01
    assert 3.5 < errs[0] / errs[1] < 4.5


def test_biharmonic_zero_and_trace_rejection():
    g = line(21)
    np.testing.assert_array_equal(apply_biharmonic_navier(np.zeros(21), g), 0.0)
    with pytest.raises(ValueError, match="boundary"):
        apply_biharmonic_navier(np.ones(21), g)


def test_apply_P_zeroth_order_coefficient():
    g = line(161)
    x = g.coords(0)
    y = np.sin(PI * x)
    y[[0, -1]] = 0.0
    coeffs = CoefficientSet(g, {(0,): np.ones(161)}, M0=1.0)
    out = apply_P(y, np.zeros_like(y), coeffs, g)
    np.testing.assert_allclose(out, (PI**4 + 1) * y, atol=2e-3 * PI**4)


def test_apply_P_on_modal_solution():
    g = build_grid(1, [(0, 1)], [81], 1e-3, 200)
    x, t = g.coords(0), g.times
    y = np.exp(-(PI**4) * t)[:, None] * np.sin(PI * x)[None, :]
    y[:, [0, -1]] = 0.0
    dty = -(PI**4) * y
    res = apply_P(y, dty, CoefficientSet.zero(g), g)
    assert np.max(np.abs(res)) < 1e-3 * PI**4
    np.testing.assert_array_equal(apply_P(np.zeros_like(y), np.zeros_like(y), CoefficientSet.zero(g), g), 0.0)


def test_apply_P_grid_mismatch():
    g = line(21)
    with pytest.raises(ValueError):
        apply_P(np.zeros(21), np.zeros(20), CoefficientSet.zero(g), g)
    with pytest.raises(ValueError):
        apply_P(np.zeros(21), np.zeros(21), CoefficientSet.zero(line(31)), g)


def test_coefficient_bound_enforced():
    with pytest.raises(ValueError, match="M0"):
        CoefficientSet(line(21), {(1,): np.full(21, 2.0)}, M0=1.0)


def test_sobolev_norm_examples():
    g = line(401)
    x = g.coords(0)
    assert sobolev_norm(np.zeros(401), g, 2) == 0.0
    assert sobolev_norm(np.ones(401), g, 0) == pytest.approx(1.0, rel=1e-12)
    assert sobolev_norm(np.sin(PI * x), g, 1) == pytest.approx(np.sqrt(0.5 + PI**2 / 2), rel=1e-4)
    with pytest.raises(ValueError):
        sobolev_norm(np.ones(401), g, 5)


def test_trace_surrogate_examples():
    face = Face(0, "low")
    zero = CauchyTrace(np.zeros((4, 101, 1)), 0.01, face)
    assert trace_norm_surrogate(zero, 0) == 0.0
    ones = CauchyTrace(np.ones((4, 101, 1)), 0.01, face)
    assert trace_norm_surrogate(ones, 0) == pytest.approx(1.0, rel=1e-12)
    n = 401
    y = np.linspace(0, 1, n)
    vals = np.zeros((4, 11, n))
    vals[3] = np.sin(PI * y)
    tr = CauchyTrace(vals, 0.1, face, h_tan=1.0 / (n - 1))
    assert trace_norm_surrogate(tr, 3) == pytest.approx(np.sqrt(0.5 + PI**2 / 2), rel=1e-4)
    with pytest.raises(ValueError):
        trace_norm_surrogate(tr, 4)


@pytest.mark.parametrize("shape", [(41,), (17, 17)])
def test_navier_biharmonic_symmetric_psd(shape):
    g = build_grid(len(shape), [(0, 1)] * len(shape), list(shape), 1.0, 8)
    K = operators_for(g).biharmonic_navier().matrix
    inner = np.flatnonzero(g.interior_mask().ravel())
    Ki = K[inner][:, inner].toarray()
    np.testing.assert_allclose(Ki, Ki.T, rtol=0, atol=1e-10 * np.abs(Ki).max())
    assert np.linalg.eigvalsh(0.5 * (Ki + Ki.T)).min() > 0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), k=st.integers(0, 3))
def test_sobolev_norm_monotone_in_order(seed, k):
    g = line(33)
    f = np.random.default_rng(seed).standard_normal(33)
    assert sobolev_norm(f, g, k + 1) >= sobolev_norm(f, g, k)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_navier_symmetry_random_pairs(seed):
    g = build_grid(2, [(0, 1), (0, 1)], [13, 13], 1.0, 8)
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal((2,) + g.shape)
    u[g.boundary_mask()] = 0.0
    v[g.boundary_mask()] = 0.0
    a = np.sum(v * apply_biharmonic_navier(u, g))
    b = np.sum(u * apply_biharmonic_navier(v, g))
    assert abs(a - b) <= 1e-10 * max(abs(a), abs(b))
    assert np.sum(u * apply_biharmonic_navier(u, g)) >= 0
