import json
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eigenliquidity.calibration import (
    CalibrationConfig,
    CalibrationError,
    CovariationSet,
    MarketSeries,
    _external_standardization,
    compute_covariations,
    deconvolve_kernel,
    estimate_covariance_and_standardize,
    estimate_mode_liquidities,
    fit_power_law,
    resample,
    run_box2_pipeline,
)
from eigenliquidity.elm import assemble_impact_matrix, check_no_manipulation
from eigenliquidity.errors import InputError, NumericalError
from eigenliquidity.kernel import DEFAULT_KERNEL, DecayKernel, eval_kernel
from eigenliquidity.spectral import EigenStructure, decompose, eigen_portfolios
from eigenliquidity.synthgen import build_world, generate_market, variance_split
from oracles import ar1_response

seeds = st.integers(0, 2**32 - 1)


def world(n, days, seed, **extra):
    doc = {"n_assets": n, "n_days": days, "seed": seed, "noise_share": 0.5, "burn_in_days": 5}
    doc.update(extra)
    return build_world(doc)


def series_from(prices, flows, dt=300.0, units="risk"):
    prices = np.atleast_2d(prices)
    ids = [f"A{i}" for i in range(prices.shape[0])]
    return MarketSeries(ids, dt, prices, flows, units)


def relative_errors(report, truth, modes):
    got = report.liquidities.liquidities[modes]
    return got / truth.liquidities[modes] - 1


# ---------------------------------------------------------------- covariance


def test_identical_series_are_perfectly_correlated():
    p = 100 + np.cumsum(np.random.default_rng(0).standard_normal(500))
    s = series_from(np.vstack([p, p]), np.zeros((2, 500)), units="shares")
    std = estimate_covariance_and_standardize(s, 10)
    assert std.correlation[0, 1] == 1.0


def test_white_noise_prices_uncorrelated():
    rng = np.random.default_rng(1)
    p = np.cumsum(rng.standard_normal((3, 10_001)), axis=1)
    std = estimate_covariance_and_standardize(series_from(p, np.zeros_like(p)), 1)
    off = std.correlation[~np.eye(3, dtype=bool)]
    assert np.abs(off).max() < 0.05


def test_standardization_units():
    rng = np.random.default_rng(2)
    p = np.cumsum(rng.standard_normal((2, 20_001)), axis=1) * np.array([[2.0], [0.5]])
    v = rng.standard_normal((2, 20_001))
    std = estimate_covariance_and_standardize(series_from(p, v, units="shares"), 20)
    sigma = std.volatilities
    np.testing.assert_allclose(std.series.prices, p / sigma[:, None])
    np.testing.assert_allclose(std.series.flows, v * sigma[:, None])
    assert std.series.flow_units == "risk"
    np.testing.assert_allclose(sigma, [2.0 * np.sqrt(20), 0.5 * np.sqrt(20)], rtol=0.1)


def test_generated_correlation_within_three_standard_errors():
    w = world(4, 250, 7, noise_share=1.0)
    std = estimate_covariance_and_standardize(generate_market(w), w.bins_per_day)
    rho = w.model.correlation
    se = (1 - rho**2) / np.sqrt(w.n_days)
    off = ~np.eye(4, dtype=bool)
    assert np.all(np.abs(std.correlation - rho)[off] <= 3 * se[off])


def test_covariance_needs_enough_days():
    p = np.zeros((3, 31))
    p[:, 1:] = np.random.default_rng(3).standard_normal((3, 30))
    with pytest.raises(InputError, match="non-overlapping"):
        estimate_covariance_and_standardize(series_from(p, np.zeros_like(p)), 10)


def test_zero_volatility_rejected():
    p = np.vstack([np.ones(200), np.arange(200.0)])
    with pytest.raises(InputError, match="zero volatility"):
        estimate_covariance_and_standardize(series_from(p, np.zeros_like(p)), 10)


# ---------------------------------------------------------------- covariations


def test_zero_flows_give_zero_covariations():
    p = np.cumsum(np.random.default_rng(4).standard_normal((2, 1000)), axis=1)
    cov = compute_covariations(series_from(p, np.zeros_like(p)), 10)
    assert not np.any(cov.response)
    assert not np.any(cov.flow_cov)


def test_iid_flows_have_delta_autocorrelation():
    rng = np.random.default_rng(5)
    q = rng.standard_normal((3, 100_000))
    cov = compute_covariations(series_from(np.zeros_like(q), q), 20)
    cbar = cov.mean_flow_autocorrelation
    assert cbar[20] == pytest.approx(1.0, abs=1e-12)
    assert np.abs(np.delete(cbar, 20)).max() < 0.01


def test_max_lag_bounded_by_length():
    q = np.ones((1, 100))
    with pytest.raises(InputError):
        compute_covariations(series_from(np.zeros_like(q), q), 10)
    with pytest.raises(InputError, match="standardized"):
        compute_covariations(series_from(np.zeros_like(q), q, units="shares"), 2)


@given(seeds, st.integers(1, 4), st.integers(0, 8))
def test_flow_covariance_stationarity_identity(seed, n, lag):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((n, 200))
    cov = compute_covariations(series_from(rng.standard_normal((n, 200)), q), 8)
    np.testing.assert_allclose(cov.c(-lag), cov.c(lag).T, rtol=0, atol=1e-12)


def test_response_matches_forward_model():
    lags = (0, 1, 3, 10)
    got = []
    for seed in range(20):
        w = world(2, 100, seed, noise_share=0.7, correlation=[[1.0, 0.5], [0.5, 1.0]])
        truth = _external_standardization(generate_market(w), w.model.correlation, w.model.volatilities)
        got.append(compute_covariations(truth.series, 10).response[list(lags)])
    got = np.array(got)
    dt = w.bin_seconds
    phi = eval_kernel(w.model.kernel, np.arange(2000) * dt)
    deriv = np.diff(np.concatenate([[0.0], phi])) / dt
    g = assemble_impact_matrix(w.model)
    flow_var = (variance_split(w).flow_level * w.flow_scales) ** 2
    expected = np.array([ar1_response(g, deriv, flow_var, w.flow_persistence, dt, m) for m in lags])
    se = got.std(axis=0, ddof=1) / np.sqrt(len(got))
    assert np.all(np.abs(got.mean(axis=0) - expected) <= 4 * se)


# ---------------------------------------------------------------- kernel


def _synthetic_covariations(kernel, dt, max_lag, cbar):
    """Response built from an exact derivative table and a given flow autocorrelation."""
    lags = np.arange(max_lag + 1) * dt
    phi = eval_kernel(kernel, lags)
    deriv = np.diff(np.concatenate([[0.0], phi])) / dt
    L = max_lag
    c_at = lambda k: cbar[L + k] if abs(k) <= L else 0.0
    rbar = np.array([sum(deriv[k] * c_at(m - k) for k in range(L + 1)) * dt for m in range(L + 1)])
    response = rbar[:, None, None] * np.ones((1, 1, 1))
    flow_cov = np.asarray(cbar)[:, None, None]
    return CovariationSet(dt, L, response, flow_cov), phi, deriv


def test_white_noise_deconvolution_is_normalized_cumsum():
    L = 40
    cbar = np.zeros(2 * L + 1)
    cbar[L] = 1.0
    cov, phi, deriv = _synthetic_covariations(DEFAULT_KERNEL, 300.0, L, cbar)
    fit = deconvolve_kernel(cov)
    np.testing.assert_allclose(fit.phi_table, phi, rtol=1e-5)
    # deriv[0] = 1/dt, so the normalized derivative is deriv itself
    np.testing.assert_allclose(fit.derivative, deriv, rtol=1e-5)
    assert fit.phi_table[0] == 1.0
    assert fit.kernel.alpha == pytest.approx(0.2, rel=1e-3)
    assert fit.kernel.tau0 == pytest.approx(90.0, rel=1e-2)


def test_ar1_flows_deconvolve_exactly():
    L, a = 30, 0.6
    cbar = a ** np.abs(np.arange(-L, L + 1)).astype(float)
    kernel = DecayKernel(0.4, 600.0)
    cov, phi, _ = _synthetic_covariations(kernel, 300.0, L, cbar)
    fit = deconvolve_kernel(cov, ridge=1e-12)
    np.testing.assert_allclose(fit.phi_table, phi, rtol=1e-4)


def test_zero_flow_autocorrelation_fails_with_diagnostic():
    cov = CovariationSet(300.0, 3, np.zeros((4, 1, 1)), np.zeros((7, 1, 1)))
    with pytest.raises(NumericalError, match="identically zero"):
        deconvolve_kernel(cov)


def test_ill_conditioned_deconvolution_reports_condition():
    L = 5
    cbar = np.ones(2 * L + 1)
    cov = CovariationSet(300.0, L, np.ones((L + 1, 1, 1)), cbar[:, None, None])
    with pytest.raises(NumericalError, match="condition number"):
        deconvolve_kernel(cov, ridge=0.0)


@given(st.floats(0.05, 2.0), st.floats(30.0, 3000.0))
def test_power_law_fit_recovers_exact_tables(alpha, tau0):
    lags = np.arange(61) * 300.0
    table = (1 + lags / tau0) ** -alpha
    kernel, rmse = fit_power_law(lags, table)
    assert rmse < 1e-8
    np.testing.assert_allclose(kernel(lags), table, atol=1e-7)


def test_derivative_table_sources():
    L = 20
    cbar = np.zeros(2 * L + 1)
    cbar[L] = 1.0
    cov, _, _ = _synthetic_covariations(DEFAULT_KERNEL, 300.0, L, cbar)
    fit = deconvolve_kernel(cov)
    assert fit.derivative_table("table") is fit.derivative
    np.testing.assert_allclose(fit.derivative_table("fit"), fit.derivative, rtol=1e-3)
    with pytest.raises(InputError):
        fit.derivative_table("spline")


# ---------------------------------------------------------------- liquidities


def test_mode_estimator_on_exact_moments():
    rng = np.random.default_rng(12)
    rho = np.array([[1.0, 0.5, 0.2], [0.5, 1.0, 0.3], [0.2, 0.3, 1.0]])
    eigen = decompose(rho)
    g = np.array([2e-7, 5e-7, 9e-7])
    impact = (eigen.vectors * (eigen.values * g)) @ eigen.vectors.T
    L, dt, a = 15, 300.0, 0.5
    phi = eval_kernel(DEFAULT_KERNEL, np.arange(L + 1) * dt)
    deriv = np.diff(np.concatenate([[0.0], phi])) / dt
    var = rng.uniform(0.5, 2.0, 3)
    c = lambda k: np.diag(var) * a ** abs(k)
    flow_cov = np.array([c(k) for k in range(-L, L + 1)])
    response = np.array([sum(impact @ c(m - k) * deriv[k] for k in range(L + 1)) * dt for m in range(L + 1)])
    cov = CovariationSet(dt, L, response, flow_cov)
    est = estimate_mode_liquidities(cov, eigen, eigen_portfolios(eigen), deriv)
    # per-mode flows are mixed across modes, so the ratio is exact only up to cross terms
    np.testing.assert_allclose(est.liquidities, g, rtol=0.25)
    assert est.status == ("ok", "ok", "ok")


def test_isotropic_flows_make_estimator_exact():
    rho = np.array([[1.0, 0.6], [0.6, 1.0]])
    eigen = decompose(rho)
    g = np.array([1e-7, 4e-7])
    impact = (eigen.vectors * (eigen.values * g)) @ eigen.vectors.T
    L, dt, a = 12, 300.0, 0.7
    phi = eval_kernel(DEFAULT_KERNEL, np.arange(L + 1) * dt)
    deriv = np.diff(np.concatenate([[0.0], phi])) / dt
    # flows correlated like prices decouple the modes exactly
    c = lambda k: rho * a ** abs(k)
    flow_cov = np.array([c(k) for k in range(-L, L + 1)])
    response = np.array([sum(impact @ c(m - k) * deriv[k] for k in range(L + 1)) * dt for m in range(L + 1)])
    est = estimate_mode_liquidities(CovariationSet(dt, L, response, flow_cov), eigen,
                                    eigen_portfolios(eigen), deriv)
    np.testing.assert_allclose(est.liquidities, g, rtol=1e-10)


def test_modes_below_floor_are_not_estimated():
    w = world(5, 60, 13)
    report = run_box2_pipeline(generate_market(w), CalibrationConfig(eigen_floor=0.2))
    clipped = report.eigen.clipped
    assert clipped.any()
    est = report.liquidities
    assert np.all(np.isnan(est.liquidities[clipped]))
    assert all(s == "below_floor" for s, c in zip(est.status, clipped) if c)
    assert np.all(np.isfinite(est.liquidities[~clipped]))
    assert np.all(report.model().liquidities[clipped] == 0.0)
    modes = report.to_dict()["modes"]
    assert all(m["liquidity_g"] is None for m, c in zip(modes, clipped) if c)


def test_zero_denominator_reported():
    eigen = decompose(np.eye(2))
    cov = CovariationSet(300.0, 2, np.zeros((3, 2, 2)), np.zeros((5, 2, 2)))
    est = estimate_mode_liquidities(cov, eigen, eigen_portfolios(eigen), np.ones(3))
    assert est.status == ("zero_denominator", "zero_denominator")
    assert not est.estimated.any()
    with pytest.raises(InputError):
        estimate_mode_liquidities(cov, eigen, eigen_portfolios(eigen), np.ones(4))


# ---------------------------------------------------------------- pipeline


def test_pipeline_recovers_kernel_and_passes_manipulation_check():
    w = world(4, 150, 21)
    report = run_box2_pipeline(generate_market(w))
    assert report.kernel.alpha == pytest.approx(0.2, abs=0.05)
    assert report.kernel.tau0 == pytest.approx(90.0, abs=30.0)
    assert report.kernel_fit.phi_table[0] == 1.0
    assert check_no_manipulation(report.model()).passed


def test_uniform_liquidity_world_gives_equal_estimates():
    w = world(4, 1000, 22, mode_liquidities=[2e-8] * 4)
    report = run_box2_pipeline(generate_market(w))
    g = report.liquidities.liquidities
    assert np.all(np.abs(g / 2e-8 - 1) < 0.15)
    assert g.std() / g.mean() < 0.1


def test_two_asset_world_recovers_both_modes():
    r = 0.6
    w = world(2, 1000, 23, correlation=[[1.0, r], [r, 1.0]], mode_liquidities=[2e-8, 4e-8])
    report = run_box2_pipeline(generate_market(w))
    err = relative_errors(report, w.model, [0, 1])
    assert np.all(np.abs(err) < 0.15)
    g_abs = report.liquidities.liquidities[0] * report.eigen.values[0]
    assert g_abs == pytest.approx((1 + r) * 2e-8, rel=0.15)


def test_liquidity_error_shrinks_with_data():
    def mean_abs_error(days):
        errs = []
        for seed in range(6):
            w = world(3, days, 100 + seed, top_ratio=1.8)
            rep = run_box2_pipeline(generate_market(w))
            errs.append(np.abs(relative_errors(rep, w.model, [0, 1, 2])).mean())
        return float(np.mean(errs))

    short, long = mean_abs_error(100), mean_abs_error(400)
    # four times the data should roughly halve the error
    assert long < 0.75 * short


def test_pipeline_is_deterministic():
    w = world(3, 60, 24)
    series = generate_market(w)
    a = json.dumps(run_box2_pipeline(series).to_dict(), sort_keys=True)
    b = json.dumps(run_box2_pipeline(series).to_dict(), sort_keys=True)
    assert a == b


def test_external_correlation_is_used():
    w = world(3, 60, 25)
    rho, sigma = w.model.correlation, w.model.volatilities
    report = run_box2_pipeline(generate_market(w), correlation=rho, volatilities=sigma)
    np.testing.assert_allclose(report.correlation, rho, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(report.volatilities, sigma)
    with pytest.raises(CalibrationError):
        run_box2_pipeline(generate_market(w), correlation=rho)


def test_failure_reports_step_and_partial():
    w = world(3, 60, 26)
    series = generate_market(w)
    flat = MarketSeries(series.instrument_ids, series.dt, series.prices, np.zeros_like(series.flows))
    with pytest.raises(CalibrationError) as info:
        run_box2_pipeline(flat)
    err = info.value
    assert err.step == "kernel"
    assert err.exit_code == 1
    assert err.partial.correlation is not None
    assert err.partial.kernel_fit is None
    assert "kernel" not in err.partial.to_dict()

    with pytest.raises(CalibrationError) as info:
        run_box2_pipeline(series, CalibrationConfig(bin_seconds=450.0))
    assert info.value.step == "resample"
    assert info.value.exit_code == 2


def test_negative_liquidity_reported_not_clipped():
    w = world(2, 100, 27)
    s = generate_market(w)
    flipped = MarketSeries(s.instrument_ids, s.dt, s.prices, -s.flows)
    with pytest.warns(RuntimeWarning, match="negative liquidity"):
        report = run_box2_pipeline(flipped)
    assert "negative" in report.liquidities.status
    assert np.any(report.liquidities.liquidities < 0)
    assert np.all(report.model().liquidities >= 0)
    assert np.any(report.model(force_negative=True).liquidities < 0)
    assert report.warnings


def test_resample_aggregates_blocks():
    p = np.arange(12.0)[None, :]
    v = np.arange(12.0)[None, :]
    out = resample(series_from(p, v, dt=60.0), 180.0)
    assert out.dt == 180.0
    np.testing.assert_array_equal(out.prices, [[0.0, 3.0, 6.0, 9.0]])
    np.testing.assert_array_equal(out.flows, [[1.0, 4.0, 7.0, 10.0]])
    with pytest.raises(InputError):
        resample(series_from(p, v, dt=60.0), 90.0)


def test_market_series_validation():
    with pytest.raises(InputError):
        MarketSeries(["A"], 1.0, np.ones((1, 5)), np.ones((1, 4)))
    with pytest.raises(InputError):
        MarketSeries(["A", "B"], 1.0, np.ones((1, 5)), np.ones((1, 5)))
    with pytest.raises(InputError):
        MarketSeries(["A"], 1.0, np.array([[1.0, np.nan]]), np.ones((1, 2)))
    with pytest.raises(InputError):
        MarketSeries(["A"], 0.0, np.ones((1, 2)), np.ones((1, 2)))
    with pytest.raises(InputError):
        MarketSeries(["A"], 1.0, np.ones((1, 2)), np.ones((1, 2)), flow_units="lots")


def test_eigen_structure_used_is_cleaned():
    w = world(3, 60, 28)
    report = run_box2_pipeline(generate_market(w), CalibrationConfig(eigen_floor=0.0))
    assert isinstance(report.eigen, EigenStructure)
    assert report.eigen.values.sum() == pytest.approx(3.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        report.to_dict()


def test_mode_liquidity_estimator_is_unbiased_across_seeds():
    errs = []
    for seed in range(20):
        w = world(6, 250, 500 + seed, top_ratio=2.5, burn_in_days=20)
        rep = run_box2_pipeline(generate_market(w))
        errs.append(relative_errors(rep, w.model, np.arange(6)))
    errs = np.array(errs)
    se = errs.std(axis=0, ddof=1) / np.sqrt(len(errs))
    assert np.all(np.abs(errs.mean(axis=0)) <= 3 * se + 0.01)
