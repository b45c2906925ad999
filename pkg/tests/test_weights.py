from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fourthlab.geometry import Face, build_grid, build_subdomains, extend_domain
from fourthlab.weights import (
    WeightParams,
    build_cutoff,
    build_distance_fn,
    check_distance_fn,
    check_weight_bounds,
    compute_thresholds,
    dalpha_constant,
    eval_weights,
    geometric_sweep,
    ramp,
    threshold_values,
)


def params_1d(lam=1.0, t0=0.5, tau=0.5, n=101):
    g = build_grid(1, [(0, 1)], [n], 1.0, 100)
    masks = build_subdomains(g, [(0.4, 0.6)])
    d = build_distance_fn(g, masks)
    return g, masks, WeightParams.from_distance(d, lam, 1.0, t0, tau)


@pytest.fixture(scope="module")
def padded():
    g = build_grid(1, [(0, 1)], [101], 0.04, 160)
    big, masks = extend_domain(g, Face(0, "low"), 0.5, omega0=[(0.0, 0.3)])
    d = build_distance_fn(big, masks)
    return big, masks, d


def test_distance_on_padded_line(padded):
    big, masks, d = padded
    x = big.coords(0)
    assert x[0] == pytest.approx(-0.5) and x[-1] == pytest.approx(1.0)
    assert d[0] == 0.0 and d[-1] == 0.0
    assert np.all(d[1:-1] > 0)
    peak = x[np.argmax(d)]
    assert -0.4 < peak < -0.1
    # strictly monotone on either side of the peak
    k = int(np.argmax(d))
    assert np.all(np.diff(d[: k + 1]) > 0) and np.all(np.diff(d[k:]) < 0)


def test_distance_2d_boundary_zero():
    g = build_grid(2, [(0, 1), (0, 1)], [33, 33], 1.0, 8)
    masks = build_subdomains(g, [(0.4, 0.6), (0.4, 0.6)])
    d = build_distance_fn(g, masks)
    assert np.all(d[g.boundary_mask()] == 0.0)
    assert np.all(d[g.interior_mask()] > 0.0)


def test_flat_distance_rejected():
    g = build_grid(1, [(0, 1)], [101], 1.0, 8)
    masks = build_subdomains(g, [(0.4, 0.6)])
    d = np.minimum(build_distance_fn(g, masks), 0.5)
    with pytest.raises(ValueError, match="grad d"):
        check_distance_fn(d, g, masks)


def test_h_at_centre_and_quarter_points():
    _, _, p = params_1d(t0=0.5, tau=0.5)
    assert float(p.h(0.5)) == 2.0
    for t in (0.25, 0.75):
        assert float(p.h(t)) == pytest.approx(2.0 / (math.sqrt(3.0) * 0.5), rel=1e-14)


def test_alpha_direct_evaluation():
    d = np.array([0.0, 0.5, 1.0, 0.0])
    p = WeightParams.from_distance(d, 1.0, 1.0, 2.0, 1.0)
    alpha, phi, h = eval_weights(p, 2.0)
    assert h == 1.0
    assert alpha[0] == pytest.approx(1.0 - math.e**2, rel=1e-14)
    assert alpha[0] == pytest.approx(-6.389, abs=1e-3)
    np.testing.assert_allclose(phi, np.exp(d))


def test_eval_weights_outside_window():
    _, _, p = params_1d()
    with pytest.raises(ValueError):
        eval_weights(p, 1.0)


def test_alpha_negative_and_singular_at_ends():
    g, _, p = params_1d(n=51)
    alpha = p.alpha(np.linspace(0.0, 1.0, 2001))
    assert np.all(alpha < 0)
    # one nanosecond from either end of the window
    ends = np.array([p.t0 - p.tau + 1e-9, p.t0 + p.tau - 1e-9])
    assert np.all(p.alpha(ends) < -(np.finfo(float).eps ** -0.25))


def test_threshold_example():
    th = threshold_values(2.0, 0.5, 1.0, 0.2)
    assert th.delta1 == pytest.approx((1 - math.e**4) / 0.5, rel=1e-14)
    assert th.deltaN[2] == pytest.approx(2 / math.sqrt(3) * 2 * (math.exp(0.4) - math.e**4), rel=1e-14)
    assert th.deltaN[2] < th.deltaN[3] < th.deltaN[4] and th.delta0 > 0
    # the N/sqrt(N^2-1) factor pushes delta(2) below delta1 once e^{2 lam d_max} is large
    assert th.deltaN[2] < th.delta1 and not th.ordered()


def test_threshold_ordering_at_small_lambda():
    th = threshold_values(0.25, 0.5, 1.0, 0.5)
    assert th.ordered() and th.delta0 > 0


def test_threshold_limit_in_N():
    lam, tau, dmax, floor = 1.0, 0.5, 1.0, 0.3
    limit = (math.exp(lam * floor) - math.exp(2 * lam * dmax)) / tau
    th = threshold_values(lam, tau, dmax, floor)
    assert th.deltaN[2] < th.deltaN[3] < th.deltaN[4] < limit


def test_zero_floor_error_path(padded):
    big, masks, d = padded
    p = WeightParams.from_distance(d, 4.0, 1.0, 0.02, 0.005)
    with pytest.raises(ValueError, match="no lambda"):
        compute_thresholds(p, masks, lam_sweep=[4.0, 8.0], delta_floor=0.0)


def test_thresholds_bound_alpha_on_omega0(padded):
    big, masks, d = padded
    p = WeightParams.from_distance(d, 0.25, 1.0, 0.02, 0.005)
    th = compute_thresholds(p, masks, lam_sweep=geometric_sweep(0.25, 16))
    p = p.with_(lam=th.lam)
    from fourthlab.geometry import _dilate

    closure = _dilate(masks.omega0, 1)
    for N in (2, 3, 4):
        times = np.linspace(p.t0 - p.tau / N, p.t0 + p.tau / N, 41)
        alpha = p.alpha(times)[:, closure]
        assert np.all(alpha >= th.deltaN[N] * (1 + 1e-12))


def test_cutoff_values(padded):
    big, masks, d = padded
    p = WeightParams.from_distance(d, 0.25, 1.0, 0.02, 0.005)
    th = compute_thresholds(p, masks)
    band = th.deltaN[3] - th.deltaN[2]
    assert float(ramp((th.deltaN[4] - th.deltaN[2]) / band)) == 1.0
    assert float(ramp(0.5)) == 0.5
    chi = build_cutoff(p, th, np.linspace(0.016, 0.024, 9))
    outer = big.boundary_mask()
    assert np.all(chi[:, outer] == 0.0)
    # alpha <= delta1 on the outer boundary
    assert np.all(p.alpha(np.linspace(0.016, 0.024, 9))[:, outer] <= th.delta1 + 1e-9 * abs(th.delta1))


def test_empty_band_rejected(padded):
    big, masks, d = padded
    p = WeightParams.from_distance(d, 0.25, 1.0, 0.02, 0.005)
    th = threshold_values(0.25, 0.005, p.d_max, 0.1)
    th.deltaN[3] = th.deltaN[2]
    with pytest.raises(ValueError, match="empty"):
        build_cutoff(p, th, np.array([0.02]))


def test_weight_bounds_sweep():
    g, _, p = params_1d()
    rep = check_weight_bounds(p, g.times, [1.0, 10.0, 100.0])
    assert rep.s7_non_increasing()
    assert math.isfinite(rep.dalpha_phi2)


def test_dalpha_ratio_zero_at_centre():
    _, _, p = params_1d()
    assert dalpha_constant(p, np.array([p.t0])) == 0.0


@pytest.mark.parametrize("lam", [1.0, 4.0])
def test_dalpha_constant_finite(lam):
    g, _, p = params_1d(lam=lam)
    c = dalpha_constant(p, g.times)
    assert math.isfinite(c) and c > 0


@settings(max_examples=50, deadline=None)
@given(x=st.floats(-1.0, 2.0, allow_nan=False))
def test_ramp_symmetry_and_range(x):
    r = float(ramp(x))
    assert 0.0 <= r <= 1.0
    assert r + float(ramp(1.0 - x)) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(u=st.floats(-0.49, 0.49), lam=st.floats(0.5, 4.0))
def test_time_comparison(u, lam):
    _, _, p = params_1d(lam=lam)
    t = p.t0 + u
    a_t = p.alpha(t)[0]
    a_0 = p.alpha(p.t0)[0]
    dh = float(p.h(t) - p.h(p.t0))
    assert dh >= 0
    diff = a_t - a_0
    slack = 1e-9 * np.abs(a_0).max()
    assert np.all(diff <= -dh * (math.exp(2 * lam * p.d_max) - math.exp(lam * p.d_max)) + slack)
    assert np.all(diff >= -dh * (math.exp(2 * lam * p.d_max) - math.exp(lam * p.d_min)) - slack)
