"""Fitting the propagator model to price and signed-flow series.

Pipeline:

1. daily price covariance and volatilities;
2. standardized prices ``x = p / sigma`` and risk flows ``q = sigma * v``;
3. lagged response ``r(tau) = E[xdot_t q_{t-tau}^T]`` and flow covariances
   ``c(tau) = E[q_t q_{t-tau}^T]``;
4. kernel derivative by regularized Toeplitz deconvolution of the
   asset-averaged response, normalized by ``phi(0) = 1``, then a parametric fit;
5-6. eigen-portfolios of the correlation matrix and mode projections;
7. per-mode liquidities with the maximum-likelihood ratio estimator.

Lag conventions: with prices sampled at the start of each bin and flows
accumulated within a bin, ``xdot_t = (x_{t+1} - x_t) / dt`` responds to
``q_{t-m}`` through ``phidot_m = [phi(m dt) - phi((m-1) dt)] / dt``. The
``m = 0`` entry is the immediate jump ``phi(0) / dt``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize

from .elm import PropagatorModel
from .errors import EigenLiquidityError, InputError, NumericalError
from .kernel import DecayKernel, eval_kernel, eval_kernel_derivative
from .spectral import (
    DEFAULT_RELATIVE_FLOOR,
    EigenPortfolios,
    EigenStructure,
    clean_eigenvalues,
    decompose,
    eigen_portfolios,
    validate_correlation,
)

log = logging.getLogger(__name__)

FLOW_UNITS = ("shares", "risk")


@dataclass(frozen=True)
class MarketSeries:
    """Uniformly sampled prices and signed flows, shape ``(N, T)``.

    ``prices[i, t]`` is the price at the start of bin ``t``; ``flows[i, t]``
    is the signed trading rate during bin ``t``, either in shares per second
    (``flow_units='shares'``) or in dollars of risk per second (``'risk'``).
    """

    instrument_ids: tuple
    dt: float
    prices: np.ndarray
    flows: np.ndarray
    flow_units: str = "shares"

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.prices, dtype=float))
        v = np.atleast_2d(np.asarray(self.flows, dtype=float))
        ids = tuple(str(s) for s in self.instrument_ids)
        if p.shape != v.shape:
            raise InputError(f"price shape {p.shape} differs from flow shape {v.shape}")
        if p.shape[0] != len(ids):
            raise InputError(f"{len(ids)} instrument ids for {p.shape[0]} series")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(v))):
            raise InputError("series contain gaps or non-finite values")
        if not self.dt > 0:
            raise InputError(f"sampling interval must be positive, got {self.dt}")
        if self.flow_units not in FLOW_UNITS:
            raise InputError(f"flow units must be one of {FLOW_UNITS}")
        object.__setattr__(self, "prices", p)
        object.__setattr__(self, "flows", v)
        object.__setattr__(self, "instrument_ids", ids)

    @property
    def n_assets(self) -> int:
        return self.prices.shape[0]

    @property
    def length(self) -> int:
        return self.prices.shape[1]


def resample(series: MarketSeries, bin_seconds: float) -> MarketSeries:
    """Aggregate to coarser bins: first price of each block, mean flow rate."""
    ratio = bin_seconds / series.dt
    k = int(round(ratio))
    if k < 1 or abs(ratio - k) > 1e-9 * ratio:
        raise InputError(
            f"bin size {bin_seconds}s is not a multiple of the sampling interval {series.dt}s"
        )
    if k == 1:
        return series
    nb = series.length // k
    p = series.prices[:, : nb * k : k]
    v = series.flows[:, : nb * k].reshape(series.n_assets, nb, k).mean(axis=2)
    return replace(series, dt=series.dt * k, prices=p, flows=v)


@dataclass(frozen=True)
class Standardization:
    correlation: np.ndarray
    volatilities: np.ndarray
    covariance: np.ndarray
    series: MarketSeries  # x = p / sigma, q = sigma * v in risk units
    n_windows: int


def estimate_covariance_and_standardize(series: MarketSeries, horizon: int) -> Standardization:
    """Price covariance over ``horizon`` bins and the standardized series.

    ``Sigma = E[(p_{t+h} - p_t)(p_{t+h} - p_t)^T]`` is the time average over
    every start bin ``t`` (overlapping windows, no overlap correction, no
    demeaning).
    """
    n, length = series.n_assets, series.length
    horizon = int(horizon)
    if horizon < 1:
        raise InputError("covariance horizon must be at least one bin")
    n_days = (length - 1) // horizon
    if n_days < n + 1:
        raise InputError(
            f"{n_days} non-overlapping horizons for {n} instruments; need at least {n + 1}"
        )
    diff = series.prices[:, horizon:] - series.prices[:, :-horizon]
    cov = diff @ diff.T / diff.shape[1]
    var = np.diag(cov)
    sigma = np.sqrt(var)
    if np.any(sigma <= 0):
        bad = [series.instrument_ids[i] for i in np.flatnonzero(sigma <= 0)]
        raise InputError(f"zero volatility for instruments {bad}")
    # sqrt of the product, not the product of sqrts: identical series then give exactly 1
    rho = cov / np.sqrt(np.outer(var, var))
    rho = 0.5 * (rho + rho.T)
    np.fill_diagonal(rho, 1.0)
    x = series.prices / sigma[:, None]
    q = series.flows * sigma[:, None] if series.flow_units == "shares" else series.flows
    std = replace(series, prices=x, flows=q, flow_units="risk")
    return Standardization(rho, sigma, cov, std, diff.shape[1])


@dataclass(frozen=True)
class CovariationSet:
    """Lagged response and flow covariance matrices.

    ``response[m]`` is ``r(m) = E[xdot_t q_{t-m}^T]`` for ``m = 0..L``;
    ``flow_cov[L + m]`` is ``c(m) = E[q_t q_{t-m}^T]`` for ``m = -L..L``.
    """

    dt: float
    max_lag: int
    response: np.ndarray
    flow_cov: np.ndarray

    def c(self, lag: int) -> np.ndarray:
        return self.flow_cov[self.max_lag + lag]

    @property
    def mean_response(self) -> np.ndarray:
        """Asset-averaged diagonal response ``rbar(m)``, m = 0..L."""
        return np.einsum("mii->m", self.response) / self.response.shape[1]

    @property
    def mean_flow_autocorrelation(self) -> np.ndarray:
        """``cbar(m) = N^-1 sum_i c^ii(m) / c^ii(0)`` for m = -L..L."""
        diag = np.einsum("mii->mi", self.flow_cov)
        c0 = diag[self.max_lag]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(c0 > 0, diag / c0, 0.0)
        return ratio.mean(axis=1)


def compute_covariations(series: MarketSeries, max_lag: int) -> CovariationSet:
    """Time-averaged lagged cross products of price changes and flows."""
    if series.flow_units != "risk":
        raise InputError("covariations need a standardized series with risk flows")
    L = int(max_lag)
    length = series.length
    if L < 0 or L >= (length - 1) / 10:
        raise InputError(f"max lag {L} needs at least {10 * (L + 1) + 1} bins, got {length}")
    xdot = np.diff(series.prices, axis=1) / series.dt  # (N, T-1)
    q = series.flows[:, :-1]
    T = xdot.shape[1]
    n = series.n_assets
    response = np.empty((L + 1, n, n))
    cpos = np.empty((L + 1, n, n))
    qall = series.flows
    for m in range(L + 1):
        response[m] = xdot[:, m:] @ q[:, : T - m].T / (T - m)
        cpos[m] = qall[:, m:] @ qall[:, : length - m].T / (length - m)
    flow_cov = np.concatenate([np.transpose(cpos[:0:-1], (0, 2, 1)), cpos], axis=0)
    return CovariationSet(series.dt, L, response, flow_cov)


@dataclass(frozen=True)
class KernelFit:
    """Deconvolved kernel and its parametric fit.

    ``derivative[m]`` estimates ``phidot`` at lag ``(m - 1) * dt``; the
    table ``phi_table[j]`` at lag ``j * dt`` is its running sum normalized
    so that ``phi_table[0] == 1``.
    """

    dt: float
    derivative: np.ndarray
    phi_table: np.ndarray
    kernel: DecayKernel
    amplitude: float
    condition_number: float
    fit_rmse: float

    @property
    def lags(self) -> np.ndarray:
        return np.arange(self.phi_table.size) * self.dt

    def derivative_table(self, source: str = "fit") -> np.ndarray:
        """Kernel derivative on lags ``(m - 1) * dt``, m = 0..L."""
        if source == "table":
            return self.derivative
        if source != "fit":
            raise InputError(f"unknown kernel derivative source {source!r}")
        return eval_kernel_derivative(self.kernel, self.lags - self.dt, self.dt)


def _toeplitz_system(cbar: np.ndarray, L: int) -> np.ndarray:
    idx = np.arange(L + 1)
    return cbar[L + idx[:, None] - idx[None, :]]


def fit_power_law(lags: np.ndarray, table: np.ndarray) -> tuple:
    """Least-squares fit of ``(1 + tau/tau0)**-alpha`` to a kernel table.

    A coarse log-spaced grid seeds a Levenberg-Marquardt refinement in
    log-parameters. Returns ``(kernel, rmse)``.
    """
    lags = np.asarray(lags, dtype=float)
    table = np.asarray(table, dtype=float)

    def resid(logp):
        a, t0 = np.exp(logp)
        return (1.0 + lags / t0) ** (-a) - table

    best, best_sse = None, np.inf
    for a in np.geomspace(0.02, 3.0, 25):
        for t0 in np.geomspace(0.5, 2e4, 41):
            sse = float(np.sum(resid(np.log([a, t0])) ** 2))
            if sse < best_sse:
                best, best_sse = np.log([a, t0]), sse
    sol = optimize.least_squares(resid, best, method="lm", xtol=1e-12, ftol=1e-12)
    a, t0 = np.exp(sol.x)
    rmse = float(np.sqrt(np.mean(sol.fun**2)))
    return DecayKernel(alpha=float(a), tau0=float(t0)), rmse


def deconvolve_kernel(cov: CovariationSet, ridge: float = 1e-6,
                      max_condition: float = 1e12) -> KernelFit:
    """Recover the kernel derivative from ``rbar = C phidot`` (Toeplitz in ``cbar``).

    Tikhonov-regularized least squares with weight ``ridge * s_max**2``. The
    running sum of the solution, divided by its first entry, is the kernel
    table; ``(alpha, tau0)`` are then fitted to that table.
    """
    L = cov.max_lag
    cbar = cov.mean_flow_autocorrelation
    if not np.any(cbar):
        raise NumericalError("flow autocovariance is identically zero; nothing to deconvolve")
    rbar = cov.mean_response
    C = _toeplitz_system(cbar, L)
    s = np.linalg.svd(C, compute_uv=False)
    lam = ridge * s[0] ** 2
    normal = C.T @ C + lam * np.eye(L + 1)
    with np.errstate(divide="ignore"):
        cond = float(np.float64(s[0] ** 2 + lam) / (s[-1] ** 2 + lam))
    if not np.isfinite(cond) or cond > max_condition:
        raise NumericalError(f"deconvolution is ill-conditioned (condition number {cond:.3e})")
    f = np.linalg.solve(normal, C.T @ rbar)
    if f[0] == 0:
        raise NumericalError("zero immediate response; the kernel cannot be normalized")
    phi_table = np.cumsum(f) / f[0]
    kernel, rmse = fit_power_law(np.arange(L + 1) * cov.dt, phi_table)
    # f[0] * dt estimates the response amplitude times phi(0)
    derivative = f / (f[0] * cov.dt)
    return KernelFit(cov.dt, derivative, phi_table, kernel, float(f[0] * cov.dt), cond, rmse)


@dataclass(frozen=True)
class ModeLiquidityEstimate:
    """Per-mode maximum-likelihood estimates.

    ``liquidities`` holds NaN for modes that were not estimated; the reason
    is in ``status`` ('ok', 'below_floor', 'zero_denominator', 'negative').
    """

    liquidities: np.ndarray
    numerators: np.ndarray
    denominators: np.ndarray
    status: tuple

    @property
    def estimated(self) -> np.ndarray:
        return np.array([s in ("ok", "negative") for s in self.status])


def estimate_mode_liquidities(cov: CovariationSet, eigen: EigenStructure,
                              portfolios: EigenPortfolios, kernel_derivative) -> ModeLiquidityEstimate:
    """``g^a = (1/Lambda^a) * sum_m phidot_m r~^a(m) dt / sum_{m,m'} phidot_m phidot_m' c~^a(m - m') dt^2``.

    ``kernel_derivative`` is the table on lags ``(m - 1) dt``, ``m = 0..L``.
    Modes absent from ``portfolios`` or marked clipped are reported as
    ``below_floor``.
    """
    L, dt = cov.max_lag, cov.dt
    fd = np.asarray(kernel_derivative, dtype=float)
    if fd.shape != (L + 1,):
        raise InputError(f"kernel derivative table needs {L + 1} entries, got {fd.size}")
    n = eigen.n
    g = np.full(n, np.nan)
    num = np.full(n, np.nan)
    den = np.full(n, np.nan)
    status = ["below_floor"] * n
    idx = np.arange(L + 1)
    lagdiff = L + idx[:, None] - idx[None, :]
    for col, a in enumerate(portfolios.modes):
        if eigen.clipped[a]:
            continue
        pi = portfolios.weights[:, col]
        r_t = np.einsum("i,mij,j->m", pi, cov.response, pi)
        c_t = np.einsum("i,mij,j->m", pi, cov.flow_cov, pi)
        num[a] = float(fd @ r_t) * dt
        den[a] = float(fd @ c_t[lagdiff] @ fd) * dt * dt
        if not den[a] > 0:
            status[a] = "zero_denominator"
            continue
        g[a] = num[a] / den[a] / eigen.values[a]
        status[a] = "ok" if g[a] >= 0 else "negative"
    return ModeLiquidityEstimate(g, num, den, tuple(status))


@dataclass
class CalibrationConfig:
    """Knobs of the calibration pipeline.

    Attributes:
        bin_seconds: resample to this bin size first (None keeps the input).
        session_seconds: trading session length; the covariance horizon is
            ``session_seconds / bin_seconds`` bins.
        max_lag: lag window L in bins, shared by the deconvolution and the
            liquidity estimator.
        eigen_floor: eigenvalue floor relative to the top eigenvalue.
        ridge: Tikhonov weight relative to the squared top singular value.
        kernel_source: 'fit' uses the parametric kernel's derivative in the
            liquidity estimator, 'table' the raw deconvolved derivative.
        force_negative: keep negative liquidities in the fitted model.
    """

    bin_seconds: float | None = None
    session_seconds: float = 8 * 3600.0
    max_lag: int = 60
    eigen_floor: float = DEFAULT_RELATIVE_FLOOR
    ridge: float = 1e-6
    kernel_source: str = "fit"
    force_negative: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class CalibrationReport:
    """Every intermediate of the pipeline; fields are None until their step ran."""

    config: CalibrationConfig
    instrument_ids: tuple = ()
    dt: float | None = None
    horizon_bins: int | None = None
    volatilities: np.ndarray | None = None
    correlation: np.ndarray | None = None
    covariations: CovariationSet | None = None
    kernel_fit: KernelFit | None = None
    raw_eigen: EigenStructure | None = None
    eigen: EigenStructure | None = None
    floor: float | None = None
    liquidities: ModeLiquidityEstimate | None = None
    warnings: list = field(default_factory=list)

    @property
    def kernel(self) -> DecayKernel:
        return self.kernel_fit.kernel

    def model(self, force_negative: bool | None = None) -> PropagatorModel:
        """Fitted model. Unestimated modes get ``g = 0``; so do negative ones unless forced."""
        force = self.config.force_negative if force_negative is None else force_negative
        est = self.liquidities
        g = np.where(np.isnan(est.liquidities), 0.0, est.liquidities)
        if not force:
            g = np.maximum(g, 0.0)
        return PropagatorModel(self.eigen, g, self.kernel, self.volatilities, self.instrument_ids)

    def to_dict(self) -> dict:
        out = {"config": self.config.to_dict(), "instrument_ids": list(self.instrument_ids),
               "bin_seconds": self.dt, "covariance_horizon_bins": self.horizon_bins,
               "warnings": list(self.warnings)}
        if self.volatilities is not None:
            out["volatilities"] = self.volatilities.tolist()
            out["correlation"] = self.correlation.tolist()
        if self.kernel_fit is not None:
            kf = self.kernel_fit
            out["kernel"] = kf.kernel.to_dict()
            out["kernel_fit"] = {
                "lags_seconds": kf.lags.tolist(),
                "phi_table": kf.phi_table.tolist(),
                "derivative_table": kf.derivative.tolist(),
                "amplitude": kf.amplitude,
                "condition_number": kf.condition_number,
                "fit_rmse": kf.fit_rmse,
            }
        if self.eigen is not None:
            out["eigen"] = {
                "raw_eigenvalues": self.raw_eigen.values.tolist(),
                "eigenvalues": self.eigen.values.tolist(),
                "eigenvectors": self.eigen.vectors.tolist(),
                "clipped": self.eigen.clipped.tolist(),
                "floor": self.floor,
            }
        if self.liquidities is not None:
            est = self.liquidities
            out["modes"] = [
                {
                    "mode": a,
                    "eigenvalue": float(self.eigen.values[a]),
                    "liquidity_g": None if np.isnan(est.liquidities[a]) else float(est.liquidities[a]),
                    "numerator": None if np.isnan(est.numerators[a]) else float(est.numerators[a]),
                    "denominator": None if np.isnan(est.denominators[a]) else float(est.denominators[a]),
                    "status": est.status[a],
                }
                for a in range(self.eigen.n)
            ]
        return out


class CalibrationError(EigenLiquidityError):
    """A pipeline step failed; ``partial`` holds the report up to that step."""

    def __init__(self, step: str, cause: Exception, partial: CalibrationReport):
        super().__init__(f"calibration failed at step '{step}': {cause}")
        self.step = step
        self.cause = cause
        self.partial = partial
        self.exit_code = getattr(cause, "exit_code", 1)


def _external_standardization(series: MarketSeries, correlation, volatilities) -> Standardization:
    if correlation is None or volatilities is None:
        raise InputError("an external correlation needs matching volatilities and vice versa")
    rho = validate_correlation(correlation)
    sigma = np.asarray(volatilities, dtype=float)
    if rho.shape[0] != series.n_assets or sigma.shape != (series.n_assets,):
        raise InputError("external correlation/volatilities do not match the series")
    if np.any(sigma <= 0):
        raise InputError("external volatilities must be positive")
    x = series.prices / sigma[:, None]
    q = series.flows * sigma[:, None] if series.flow_units == "shares" else series.flows
    std = replace(series, prices=x, flows=q, flow_units="risk")
    return Standardization(rho, sigma, rho * np.outer(sigma, sigma), std, 0)


def run_box2_pipeline(series: MarketSeries, config: CalibrationConfig | None = None,
                      correlation=None, volatilities=None) -> CalibrationReport:
    """Run all calibration steps in order and return the full report.

    Args:
        series: raw prices and flows.
        config: pipeline settings; defaults when omitted.
        correlation: optional externally estimated correlation matrix used
            instead of the in-sample one (for instance from a longer daily
            history). Requires ``volatilities`` as well.
        volatilities: optional daily price volatilities matching ``correlation``.
    """
    config = config or CalibrationConfig()
    report = CalibrationReport(config=config, instrument_ids=series.instrument_ids)
    step = "resample"
    try:
        if config.bin_seconds is not None:
            series = resample(series, config.bin_seconds)
        report.dt = series.dt
        step = "covariance"
        horizon = int(round(config.session_seconds / series.dt))
        report.horizon_bins = horizon
        if correlation is not None or volatilities is not None:
            std = _external_standardization(series, correlation, volatilities)
        else:
            std = estimate_covariance_and_standardize(series, horizon)
        report.volatilities = std.volatilities
        report.correlation = std.correlation
        step = "covariations"
        report.covariations = compute_covariations(std.series, config.max_lag)
        step = "kernel"
        report.kernel_fit = deconvolve_kernel(report.covariations, ridge=config.ridge)
        step = "eigen"
        report.raw_eigen = decompose(std.correlation)
        report.floor = config.eigen_floor * float(report.raw_eigen.values[0])
        report.eigen = clean_eigenvalues(report.raw_eigen, report.floor)
        step = "liquidities"
        kept = np.flatnonzero(~report.eigen.clipped)
        portfolios = eigen_portfolios(report.eigen, kept)
        report.liquidities = estimate_mode_liquidities(
            report.covariations, report.eigen, portfolios,
            report.kernel_fit.derivative_table(config.kernel_source),
        )
    except EigenLiquidityError as exc:
        raise CalibrationError(step, exc, report) from exc
    negative = [a for a, s in enumerate(report.liquidities.status) if s == "negative"]
    if negative:
        msg = f"negative liquidity on modes {negative}: model misfit"
        report.warnings.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    log.info("calibrated kernel alpha=%.4f tau0=%.1fs", report.kernel.alpha, report.kernel.tau0)
    return report
