from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fourthlab import continuation as ct
from fourthlab import experiments as ex
from fourthlab.config import ConfigError, parse_config
from fourthlab.geometry import Face, build_grid, extend_domain
from fourthlab.operators import CauchyTrace, CoefficientSet, extract_cauchy

PI = np.pi


@pytest.fixture(scope="module")
def setup(cfg):
    cs = ex.continuation_setup(cfg.continuation)
    u, trace = ex._truth(cs)
    return cs, u, trace


def line(n=101, T=0.04, Nt=40):
    return build_grid(1, [(0, 1)], [n], T, Nt)


def test_lifting_of_zero_trace():
    g = line()
    tr = CauchyTrace(np.zeros((4, g.Nt + 1, 1)), g.dt, Face(0, "low"))
    assert np.all(ct.extend_cauchy(tr, g) == 0.0)


def test_lifting_of_unit_dirichlet_trace():
    g = line()
    face = Face(0, "low")
    vals = np.zeros((4, g.Nt + 1, 1))
    vals[0] = 1.0
    lift = ct.extend_cauchy(CauchyTrace(vals, g.dt, face), g)
    r = ct.normal_coordinate(g, face)
    np.testing.assert_array_equal(lift, np.broadcast_to(ct.lifting_cutoff(r, 0.25, 0.5), lift.shape))
    back = extract_cauchy(lift, g, face)
    np.testing.assert_allclose(back.values[0], 1.0, rtol=0, atol=1e-14)
    assert np.max(np.abs(back.values[1:])) < 1e-9


def test_lifting_of_unit_trace_2d_constant_along_gamma():
    g = build_grid(2, [(0, 1), (0, 1)], [21, 21], 0.04, 10)
    face = Face(0, "low")
    vals = np.zeros((4, g.Nt + 1, 21))
    vals[0] = 1.0
    lift = ct.extend_cauchy(CauchyTrace(vals, g.dt, face, h_tan=0.05), g)
    assert np.all(lift[:, 0, :] == 1.0)
    np.testing.assert_array_equal(lift, lift[:, :, :1] * np.ones(21))


def test_lifting_taylor_remainder():
    g = line(201)
    face = Face(0, "low")
    decay = np.exp(-(PI**4) * g.times)
    vals = np.zeros((4, g.Nt + 1, 1))
    # outward normal is -x at x = 0
    vals[1, :, 0] = -PI * decay
    vals[3, :, 0] = PI**3 * decay
    lift = ct.extend_cauchy(CauchyTrace(vals, g.dt, face), g)
    x = g.coords(0)
    u = decay[:, None] * np.sin(PI * x)[None, :]
    near = x <= 0.25
    bound = (PI * x[near]) ** 5 / 120
    assert np.all(np.abs(lift - u)[:, near] <= bound + 1e-14)


def test_lifting_rejects_mismatched_trace():
    g = line()
    tr = CauchyTrace(np.zeros((4, g.Nt, 1)), g.dt, Face(0, "low"))
    with pytest.raises(ValueError, match="does not match"):
        ct.extend_cauchy(tr, g)


def test_zero_extension():
    g = line()
    big, masks = extend_domain(g, Face(0, "low"), 0.5)
    out = ct.zero_extend(np.zeros((g.Nt + 1,) + g.shape), g, big, masks)
    assert out.shape == (g.Nt + 1,) + big.shape and np.all(out == 0.0)


def test_zero_extension_rejects_second_trace():
    g = line()
    big, masks = extend_domain(g, Face(0, "low"), 0.5)
    x = g.coords(0)
    v = np.broadcast_to(1e-2 * x**2 / 2, (g.Nt + 1,) + g.shape).copy()
    with pytest.raises(ValueError, match=r"d_nu\^2 v\| = 1\.000e-02"):
        ct.zero_extend(v, g, big, masks)


def _strip(p, n):
    g = build_grid(1, [(0, 1)], [n], 0.1, 10)
    big, masks = extend_domain(g, Face(0, "low"), 0.5)
    t = g.times[:, None]
    v = g.coords(0) ** p * np.exp(-t)
    ve = ct.zero_extend(v, g, big, masks, tol=1.0)
    X = big.coords(0)
    F = np.where(X >= -1e-12, (-(X**p) + math.factorial(p) / math.factorial(p - 4) * X ** (p - 4)) * np.exp(-t), 0.0)
    return ct.strip_residual(ve, F, big, masks, CoefficientSet.zero(big))


def test_strip_residual_orders():
    # vanishing to sixth order at Gamma: the stencil sees a smooth field, O(h^2) or better
    r6 = [_strip(6, n) for n in (51, 101, 201)]
    assert all(a / b > 4.0 for a, b in zip(r6, r6[1:]))
    # only the four Cauchy traces vanish: the jump in the fourth derivative gives h^(1/2)
    r4 = [_strip(4, n) for n in (51, 101, 201)]
    np.testing.assert_allclose([a / b for a, b in zip(r4, r4[1:])], math.sqrt(2), rtol=1e-6)


def test_noise_free_reconstruction(setup):
    cs, u, trace = setup
    res = cs.continue_(trace)
    err = ex._window_error(cs, res.values, u, res.levels)
    ref = ex.spacetime_norm(u, cs.grid, 0, region=cs.omega0, levels=res.levels)
    assert err / ref < 0.10


def test_zero_trace_reconstructs_zero(setup):
    cs, _, trace = setup
    res = cs.continue_(trace.scaled(0.0))
    assert np.max(np.abs(res.values[res.levels])) <= 10 * ct.STATIONARITY_TOL


def test_eps_not_above_tau_rejected(setup, cfg):
    cs, _, trace = setup
    bad = ct.QRSettings(**{**cs.settings.__dict__, "eps": 0.5 * cs.settings.tau})
    with pytest.raises(ValueError, match="eps > tau"):
        cs.continue_(trace, settings=bad)
    data = cfg.model_dump(mode="json")
    data["continuation"]["tau"] = 2 * data["continuation"]["eps"]
    with pytest.raises(ConfigError, match="eps > tau"):
        parse_config(data)


def test_window_centres_cover_interval():
    st_ = ct.QRSettings(tau=0.005, eps=0.01)
    c = ct.window_centres(0.04, st_)
    assert c[0] == 0.01 and c[-1] >= 0.03 - 1e-12
    assert all(b - a == pytest.approx(st_.tau / 4) for a, b in zip(c, c[1:]))


def test_balance_examples():
    assert ct.balance_s(2.0, 2.0, 1.0, 1.0) == (0.0, "case2")
    c, d0 = 3.0, 0.5
    s, case = ct.balance_s(1.0, math.exp((c + d0) / 2), c, d0)
    assert case == "case1" and s == pytest.approx(1.0, rel=1e-14)
    assert ct.balance_s(1.0, 1e3, 1.0, 1.0)[0] == pytest.approx(math.log(1e3), rel=1e-14)
    assert ct.balance_s(1.0, 1e3, 1.0, 1.0)[0] == pytest.approx(6.908, abs=1e-3)
    with pytest.raises(ValueError):
        ct.balance_s(0.0, 1.0, 1.0, 1.0)


def test_budget_kappa():
    b = ct.StabilityBudget(M=10.0, delta0=1.0, C_balance=3.0)
    assert b.kappa == 0.25


def test_two_term_limits():
    D = [1e-8, 1e-4, 1e-2]
    meas = [1e-3, 1e-2, 5e-2]
    tt = ct.fit_two_term(D, meas, M=1.0, delta0=2.0, s_values=[0.0, 0.5, 1.0, 2.0])
    assert tt.holds() and math.isfinite(tt.c_fit)
    # tiny D: the a-priori term carries the bound
    prior = tt.C0 * math.exp(-1.0 * tt.delta0) * tt.M**2
    assert tt.bound(0, 1.0) == pytest.approx(prior, rel=1e-6)
    # s = 0: both exponentials are one
    assert tt.bound(2, 0.0) == pytest.approx(tt.C0 * (D[2] ** 2 + 1.0), rel=1e-14)


def test_knee_matches_balance_when_terms_are_symmetric():
    D, M, c, d0 = 1e-3, 1.0, 2.0, 2.0
    s_star, _ = ct.balance_s(D, M, c, d0)
    assert ct.two_term_knee(D, M, c, d0) == pytest.approx(s_star, rel=1e-3)


def test_holder_fit_known_powers():
    D = np.logspace(-7, -2, 6)
    assert ct.holder_fit(D, 3.0 * D**0.5).kappa_hat == pytest.approx(0.5, abs=0.02)
    fit = ct.holder_fit(D, 2.0 * D)
    assert fit.kappa_hat == pytest.approx(1.0, abs=1e-10) and fit.C_hat == pytest.approx(2.0)
    with pytest.raises(ValueError, match="decades"):
        ct.holder_fit(np.logspace(-3, -1, 6), np.logspace(-3, -1, 6))
    with pytest.raises(ValueError):
        ct.holder_fit(D[:4], D[:4])


def test_fitted_c_stable_under_refinement(cfg):
    cs_values = []
    for nodes in ([51], [101]):
        cc = cfg.continuation.model_copy(update={"nodes": nodes})
        cs = ex.continuation_setup(cc)
        u, tr = ex._truth(cs)
        sw = ct.noise_sweep(
            tr, u, cs.coeffs, cs.grid, cs.d, float(cs.d_big.max()), float(cs.d_big.min()),
            cs.settings, cs.omega0, cc.noise_levels, cc.reg_per_noise, 0,
        )
        tt = ct.fit_two_term(sw.D, sw.J_sq, ct.a_priori_bound(u, cs.grid), cs.thresholds.delta0, cc.s_table)
        cs_values.append(tt.c_fit)
    assert all(math.isfinite(c) for c in cs_values)
    assert abs(cs_values[1] / cs_values[0] - 1) < 0.3


def test_J_magnitude_of_zero_and_constant():
    g = line(41)
    assert np.all(ct.J_magnitude(np.zeros((g.Nt + 1, 41)), g) == 0.0)
    w = np.full((g.Nt + 1, 41), 2.0)
    np.testing.assert_allclose(ct.J_magnitude(w, g), 2.0, atol=1e-8)


@settings(max_examples=20, deadline=None)
@given(level=st.floats(1e-8, 1.0), seed=st.integers(0, 2**31 - 1))
def test_trace_noise_has_requested_size(level, seed):
    g = line(41)
    tr = extract_cauchy(np.zeros((g.Nt + 1, 41)), g, Face(0, "low"))
    noisy = ct.trace_noise(tr, level, np.random.default_rng(seed))
    assert noisy.data_size == pytest.approx(level, rel=1e-10)
