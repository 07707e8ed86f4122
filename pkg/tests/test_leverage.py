import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fxslv.dupire import LvGridSpec, deterministic_lv_surface
from fxslv.engine import CorrelationSpec, McConfig
from fxslv.heston import HestonParams
from fxslv.leverage import (EstimatorSpec, binning_fit, calibrate_leverage_slv2dr, calibrate_leverage_slv2sr,
                            conditional_variance, regression_fit, regression_fit_3d)
from fxslv.rates import G1ppParams
from fxslv.synthetic import ssvi_market


def test_binning_hand_example():
    fit = binning_fit([1, 3, 2, 4], [10, 30, 20, 40], M=2)
    np.testing.assert_allclose(fit.s_mean, [1.5, 3.5])
    np.testing.assert_allclose(fit.u_mean, [15, 35])
    assert fit(2.5) == pytest.approx(25.0)
    assert fit(0.0) == pytest.approx(15.0) and fit(9.0) == pytest.approx(35.0)


def test_binning_constant_and_nodes(rng):
    S = rng.lognormal(size=1001)
    fit = binning_fit(S, np.full(S.size, 0.3), M=7)
    np.testing.assert_allclose(fit(np.linspace(0, 5, 11)), 0.3)
    U = rng.uniform(size=S.size)
    fit = binning_fit(S, U, M=7)
    np.testing.assert_array_equal(fit(fit.s_mean), fit.u_mean)
    # remainder goes to the last bin
    order = np.argsort(S)
    assert fit.u_mean[-1] == pytest.approx(U[order][6 * 143:].mean())


def test_binning_errors():
    with pytest.raises(ValueError):
        binning_fit([1.0, 2.0], [1.0, 2.0], M=3)
    with pytest.raises(ValueError):
        binning_fit([1.0, 2.0], [1.0, 2.0], M=1)


def test_regression_constant_and_linear(rng):
    S = rng.lognormal(sigma=0.2, size=400)
    np.testing.assert_allclose(regression_fit(S, np.full(S.size, 0.7)).coef, [0.7, 0, 0], atol=1e-10)
    np.testing.assert_allclose(regression_fit(S, 2 + 3 * S).coef, [2, 3, 0], atol=1e-10)


def test_regression_is_least_squares(rng):
    S = rng.lognormal(sigma=0.2, size=400)
    U = 0.04 + 0.02 * (S - 1) ** 2 + 0.01 * rng.standard_normal(S.size)
    fit = regression_fit(S, U)
    design = np.vander(S, 3, increasing=True)
    best = np.sum((design @ fit.coef - U) ** 2)
    for i in range(3):
        for step in (1e-3, -1e-3):
            bumped = fit.coef.copy()
            bumped[i] += step
            assert np.sum((design @ bumped - U) ** 2) >= best


def test_regression_needs_distinct_points():
    with pytest.raises(ValueError):
        regression_fit([1.0, 1.0, 2.0, 2.0], [0.1, 0.2, 0.3, 0.4])


def test_regression_clamps_to_observed_range(rng):
    S = rng.uniform(0.9, 1.1, 500)
    U = 0.04 + 0.5 * (S - 1.0) ** 2
    fit = regression_fit(S, U)
    assert fit(10.0)[0] == pytest.approx(U.max())


def test_regression_3d_examples(rng):
    n = 2000
    S, xd, xf = rng.lognormal(sigma=0.2, size=n), 0.01 * rng.standard_normal(n), 0.01 * rng.standard_normal(n)
    np.testing.assert_allclose(regression_fit_3d(S, xd, xf, np.full(n, 0.3)).coef, [0.3, 0, 0, 0, 0, 0, 0],
                               atol=1e-8)
    coef = regression_fit_3d(S, xd, xf, 1 + 2 * xd).coef
    np.testing.assert_allclose(coef, [1, 0, 0, 2, 0, 0, 0], atol=1e-8)
    with pytest.raises(ValueError):
        regression_fit_3d(S[:5], xd[:5], xf[:5], S[:5])


def test_regression_3d_zero_rates_reduces_to_1d(rng):
    n = 2000
    S = rng.lognormal(sigma=0.2, size=n)
    U = 0.04 + 0.02 * S - 0.01 * S * S + 0.005 * rng.standard_normal(n)
    fit3 = regression_fit_3d(S, np.zeros(n), np.zeros(n), U)
    fit1 = regression_fit(S, U)
    assert fit3.ridge
    probe = np.linspace(0.8, 1.2, 9)
    np.testing.assert_allclose(fit3(probe), fit1(probe), rtol=1e-7)
    np.testing.assert_allclose(fit3.conditional_on_s(probe), fit1(probe), rtol=1e-7)


@settings(max_examples=30, deadline=None)
@given(c=st.floats(0.001, 1.0), degree=st.integers(1, 6))
def test_constant_targets_recovered_at_any_degree(c, degree):
    S = np.linspace(0.7, 1.4, 64)
    fit = regression_fit(S, np.full(S.size, c), degree=degree)
    np.testing.assert_allclose(fit(S), c, rtol=1e-8)


def test_estimator_spec_validation():
    with pytest.raises(ValueError):
        EstimatorSpec("kernel")
    with pytest.raises(ValueError):
        EstimatorSpec(degree=0)


def small_setup(horizon=0.3):
    mk = ssvi_market(horizon=horizon, spacing=0.05)
    tiv = mk.tiv()
    lv = deterministic_lv_surface(tiv, horizon, LvGridSpec(0.05, 41, 3.0)).surface
    return mk, tiv, lv


def test_degenerate_variance_gives_exact_leverage():
    mk, _, lv = small_setup()
    hp = HestonParams.constant(0.01, -0.3, 1.5, 0.01, 0.0, 1.0)
    cal = calibrate_leverage_slv2dr(lv, hp, mk.dom, mk.fgn, 1.0, McConfig(2000, 0.01, 1))
    lev = cal.surface
    np.testing.assert_allclose(lev.values[0] * np.sqrt(0.01), lv.values[0], rtol=1e-14)
    for j in range(1, len(lev)):
        np.testing.assert_array_equal(lev.strikes[j], lv.strikes[j - 1])
        np.testing.assert_allclose(lev.values[j] * 0.1, lv.values[j - 1], rtol=1e-12)


def test_slv2dr_estimators_run_and_floor_counts():
    mk, _, lv = small_setup()
    hp = HestonParams.constant(0.01, -0.3, 1.5, 0.01, 0.15, 1.0)
    for est in (EstimatorSpec("binning"), EstimatorSpec("regression"), EstimatorSpec("regression", degree=4)):
        cal = calibrate_leverage_slv2dr(lv, hp, mk.dom, mk.fgn, 1.0, McConfig(5000, 0.01, 2), est)
        assert len(cal.surface) == len(lv) + 1
        assert all(np.all(v > 0) for v in cal.surface.values)
        assert len(cal.floored) == len(cal.surface)
    with pytest.raises(ValueError):
        calibrate_leverage_slv2dr(lv, hp, mk.dom, mk.fgn, 1.0, McConfig(50, 0.01, 2), EstimatorSpec("regression3d"))


def test_slv2sr_zero_rate_vols_matches_slv2dr():
    mk, _, lv = small_setup()
    hp = HestonParams.constant(0.01, -0.3, 1.5, 0.01, 0.15, 1.0)
    dom = G1ppParams.constant(0.03, 0.0, mk.dom)
    fgn = G1ppParams.constant(0.03, 0.0, mk.fgn)
    cfg = McConfig(5000, 0.01, 3)
    sr = calibrate_leverage_slv2sr(lv, hp, dom, fgn, CorrelationSpec(), 1.0, cfg)
    dr = calibrate_leverage_slv2dr(lv, hp, mk.dom, mk.fgn, 1.0, cfg)
    for a, b, ea in zip(sr.surface.values, dr.surface.values, sr.surface.errors):
        # same seed, same paths up to the measure bookkeeping: agreement far inside MC error
        assert np.all(np.abs(a - b) <= 0.1 * ea + 1e-12)


def test_leverage_identity_at_nodes():
    mk, _, lv = small_setup()
    hp = HestonParams.constant(0.01, -0.3, 1.5, 0.01, 0.15, 1.0)
    est = EstimatorSpec("regression", degree=4)
    cal = calibrate_leverage_slv2dr(lv, hp, mk.dom, mk.fgn, 1.0, McConfig(20_000, 0.01, 4), est)
    from fxslv.engine import ModelSpec, simulate
    t = lv.times[3]
    model = ModelSpec("SLV2DR_DRN", 1.0, mk.dom, mk.fgn, heston=hp, surface=cal.surface)
    state = simulate(model, McConfig(20_000, 0.01, 5, (t,))).at(t)
    eu, se = conditional_variance(state, lv.strikes[3], est)
    L = cal.surface.values[4]
    inner = slice(8, 33)
    combined = L ** 2 * np.hypot(se, cal.cond_se[4])
    z = np.abs(L ** 2 * eu - lv.values[3] ** 2)[inner] / combined[inner]
    assert np.all(z < 3.0), z
