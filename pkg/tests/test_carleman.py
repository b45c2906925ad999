from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fourthlab import carleman as cm
from fourthlab.experiments import carleman_setup
from fourthlab.forward import modal_solution
from fourthlab.operators import CoefficientSet


@pytest.fixture(scope="module")
def setup(cfg):
    g, masks, params = carleman_setup(cfg.carleman)
    suite = cm.build_suite(g, masks, params, n=10, seed=0)
    return g, masks, params, suite


def test_zero_field_gives_zero_triple(setup):
    g, masks, params, _ = setup
    sides = cm.carleman_sides(np.zeros((g.Nt + 1,) + g.shape), g, CoefficientSet.zero(g), params, masks)
    assert (sides.lhs, sides.rhs_pde, sides.rhs_obs) == (0.0, 0.0, 0.0)
    assert sides.ratio() == 0.0


def test_modal_and_off_omega_members_finite(setup):
    g, masks, params, suite = setup
    coeffs = CoefficientSet.zero(g)
    s_values = cm.carleman_s_sweep(g, params, 0.01)
    table = cm.ratio_sweep(suite, g, coeffs, params, masks, s_values)
    assert np.all(np.isfinite(table.ratios)) and np.all(table.ratios > 0)
    # the last members vanish on omega, so only the PDE term controls them
    off = suite[-1]
    assert np.all(off[:, masks.omega] == 0.0)
    sides = cm.carleman_sides(off, g, coeffs, params, masks)
    assert sides.rhs_obs == 0.0 and sides.rhs_pde > 0 and math.isfinite(sides.ratio())
    assert table.bounded()


def test_coefficient_bound_doubling(setup):
    g, masks, params, suite = setup
    x = g.coords(0)
    base = CoefficientSet(g, {(0,): np.cos(3 * x), (1,): np.sin(2 * x), (2,): 0.5 * np.ones_like(x)}, M0=1.0)
    s_values = cm.carleman_s_sweep(g, params, 0.01)[-6:]
    c1 = cm.ratio_sweep(suite, g, base, params, masks, s_values).cmax
    c2 = cm.ratio_sweep(suite, g, base.scaled(2.0), params, masks, s_values).cmax
    factor = np.max(np.maximum(c1 / c2, c2 / c1))
    assert factor < 2.0


def test_time_shift_invariance(cfg):
    c = cfg.carleman
    g, masks, params = carleman_setup(c)
    coeffs = CoefficientSet.zero(g)
    ratios = []
    for shift in (0, 10, -12):
        p = params.with_(t0=params.t0 + shift * g.dt)
        y = modal_solution(g, 1, t_shift=p.t0)
        ratios.append(cm.carleman_sides(y, g, coeffs, p.with_(s=0.5), masks).ratio())
    np.testing.assert_allclose(ratios, ratios[0], rtol=1e-9)


def test_truncation_margin(setup):
    g, masks, params, suite = setup
    coeffs = CoefficientSet.zero(g)
    for y in suite[:4]:
        for s in (1.0, 3.0):
            a = cm.carleman_sides(y, g, coeffs, params.with_(s=s), masks, margin=1)
            b = cm.carleman_sides(y, g, coeffs, params.with_(s=s), masks, margin=2)
            assert abs(math.expm1(b.log_lhs - a.log_lhs)) < 0.01


def test_no_overflow_up_to_large_s(setup):
    g, masks, params, suite = setup
    coeffs = CoefficientSet.zero(g)
    pieces = cm.field_pieces(suite[0], g, coeffs, params, masks)
    for s in (1e2, 1e4, 1e6):
        sides = cm.sides_from_pieces(pieces, g, params, s)
        assert math.isfinite(sides.log_lhs) and math.isfinite(sides.log_rhs_pde)
        assert not math.isnan(sides.ratio())


def test_navier_violation_rejected(setup):
    g, masks, params, _ = setup
    y = np.ones((g.Nt + 1,) + g.shape)
    with pytest.raises(ValueError, match="boundary"):
        cm.carleman_sides(y, g, CoefficientSet.zero(g), params, masks)


def test_find_knee():
    assert cm.find_knee([5.0, 4.0, 3.0]) == 0
    assert cm.find_knee([1.0, 3.0, 3.1, 3.2]) == 1
    assert cm.find_knee([1.0, 2.0, 4.0, 8.0]) == 3


def test_ratio_sweep_needs_enough_points(setup):
    g, masks, params, suite = setup
    with pytest.raises(ValueError, match="knee"):
        cm.ratio_sweep(suite[:3], g, CoefficientSet.zero(g), params, masks, [1.0, 2.0, 3.0], min_above=5)


def test_energy_shift_zero_and_identity(cfg):
    c = cfg.carleman
    g, _, p = carleman_setup(c, [201], 4000)
    zero = cm.check_energy_shift(np.zeros((g.Nt + 1,) + g.shape), g, p)
    assert zero.lhs_point == 0.0 and zero.rhs_int == 0.0
    z = modal_solution(g, 1, t_shift=p.t0)
    for s in (0.1, 1.0, 10.0):
        r = cm.check_energy_shift(z, g, p.with_(s=s))
        assert r.identity_error < 0.01
        assert math.isfinite(r.ratio) and r.ratio > 0


def test_collapse_integral():
    C0, t1 = 3.0, 0.025
    assert cm.collapse_integral(0.0, C0, t1) == 2 * t1
    assert cm.collapse_integral(1e-9, C0, t1) == pytest.approx(2 * t1, rel=1e-6)
    s = 1e-3
    prev = cm.collapse_integral(s, C0, t1)
    for _ in range(12):
        s *= 2
        cur = cm.collapse_integral(s, C0, t1)
        assert cur < prev
        prev = cur


def test_collapse_table(setup):
    _, _, params, _ = setup
    col = cm.check_lebesgue_collapse(params, [10.0**k for k in range(7)])
    assert col.strictly_decreasing() and col.collapse_ratio() < 0.01


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), s=st.floats(1e-3, 1e3))
def test_sides_nonnegative(seed, s, cfg):
    g, masks, params = carleman_setup(cfg.carleman, [41], 80)
    y = cm.build_suite(g, masks, params, n=4, seed=seed)[2]
    sides = cm.carleman_sides(y, g, CoefficientSet.zero(g), params.with_(s=s), masks)
    assert sides.lhs >= 0 and sides.rhs_pde >= 0 and sides.rhs_obs >= 0 and sides.ratio() >= 0
