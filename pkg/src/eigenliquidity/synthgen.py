"""Synthetic markets with a known impact model, and random biased orders.

Forward model, in standardized units (prices in daily volatilities, flows in
dollars of risk per second)::

    x[t+1] = G @ sum_{s <= t} phi((t - s) dt) q[s] dt + noise random walk

Flows are independent per-asset Gaussian AR(1) processes. The noise
increments are correlated so that the total daily covariance of ``x`` is
the model's correlation matrix: the impact-driven daily covariance ``D`` is
computed in closed form and the noise fills in ``rho - D``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import signal, stats

from .calibration import MarketSeries
from .elm import PropagatorModel, assemble_impact_matrix, model_from_correlation, power_law_liquidities
from .errors import ConfigError, InputError
from .kernel import DecayKernel, TimeGrid, eval_kernel
from .optimizer import solve_optimal_profile

DEFAULT_TOP_LIQUIDITY = 3e7


@dataclass(frozen=True)
class WorldConfig:
    """Ground truth and simulation settings.

    Attributes:
        model: ground-truth model in standardized units.
        flow_scale: per-asset flow standard deviations in $-risk/s (scalar or
            length N). With ``noise_share`` set, only their ratios matter: the
            overall level is chosen to hit the requested variance split.
        flow_persistence: AR(1) coefficient of the flows per bin, in [0, 1).
        noise_share: fraction of daily price variance not explained by
            impact. ``None`` keeps ``flow_scale`` as an absolute level.
        n_days: kept trading days.
        bins_per_day: bins per session.
        bin_seconds: bin length.
        seed: master seed; every random stream derives from it.
        burn_in_days: simulated and discarded so flows and impact start stationary.
        extra_flows: optional deterministic flows (N, n_days * bins_per_day)
            added on top of the random ones, in $-risk/s.
        initial_price: starting price of every instrument, in $.
    """

    model: PropagatorModel
    flow_scale: object = 1.0
    flow_persistence: float = 0.8
    noise_share: float | None = 0.9
    n_days: int = 250
    bins_per_day: int = 96
    bin_seconds: float = 300.0
    seed: int = 0
    burn_in_days: int = 20
    extra_flows: np.ndarray | None = field(default=None, repr=False)
    initial_price: float = 100.0

    def __post_init__(self):
        if not 0.0 <= self.flow_persistence < 1.0:
            raise ConfigError(f"flow persistence must lie in [0, 1), got {self.flow_persistence}")
        if self.noise_share is not None and not 0.0 <= self.noise_share <= 1.0:
            raise ConfigError(f"noise share must lie in [0, 1], got {self.noise_share}")
        if self.n_days < 1 or self.bins_per_day < 2 or self.burn_in_days < 0:
            raise ConfigError("need n_days >= 1, bins_per_day >= 2, burn_in_days >= 0")
        if not self.bin_seconds > 0:
            raise ConfigError("bin length must be positive")
        scale = np.broadcast_to(np.asarray(self.flow_scale, dtype=float), (self.model.n,))
        if np.any(scale < 0) or not np.all(np.isfinite(scale)):
            raise ConfigError("flow scales must be finite and non-negative")
        if self.extra_flows is not None:
            extra = np.asarray(self.extra_flows, dtype=float)
            if extra.shape != (self.model.n, self.n_bins):
                raise ConfigError(f"extra flows need shape {(self.model.n, self.n_bins)}")

    @property
    def n_bins(self) -> int:
        return self.n_days * self.bins_per_day

    @property
    def flow_scales(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.flow_scale, dtype=float), (self.model.n,)).copy()

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "flow_scale": self.flow_scales.tolist(),
            "flow_persistence": self.flow_persistence,
            "noise_share": self.noise_share,
            "n_days": self.n_days,
            "bins_per_day": self.bins_per_day,
            "bin_seconds": self.bin_seconds,
            "seed": self.seed,
            "burn_in_days": self.burn_in_days,
            "initial_price": self.initial_price,
        }


def _daily_weight(kernel: DecayKernel, persistence: float, bins_per_day: int,
                  history: int, dt: float) -> float:
    """Variance of ``sum_s w_s u_s`` for a unit AR(1) ``u``, per unit ``dt**2``.

    ``w_s`` weights the flow in bin ``s`` in the price change over bins
    ``[0, B]``: ``w_s = Phi(B - s) - Phi(-s)`` with ``Phi(l) = phi((l - 1) dt)``
    for ``l >= 1`` and zero otherwise.
    """
    B = bins_per_day
    s = np.arange(-history, B)

    def big_phi(lag):
        return np.where(lag >= 1, eval_kernel(kernel, (lag - 1) * dt), 0.0)

    w = big_phi(B - s) - big_phi(-s)
    # h_k = w_k + a h_{k+1}, computed as a causal filter on the reversed sequence
    h = signal.lfilter([1.0], [1.0, -persistence], w[::-1])[::-1]
    a = persistence
    return float((1 - a * a) * np.sum(h * h) + a * a * h[0] ** 2)


@dataclass(frozen=True)
class VarianceSplit:
    """Daily covariance budget of a world, standardized units."""

    flow_level: float  # multiplier applied to flow_scale
    impact_covariance: np.ndarray  # D
    noise_covariance: np.ndarray  # per day, rho - D

    @property
    def impact_share(self) -> float:
        return float(np.trace(self.impact_covariance) / self.impact_covariance.shape[0])


def variance_split(config: WorldConfig) -> VarianceSplit:
    """Resolve the flow level and the noise covariance for a world.

    Raises:
        ConfigError: if the impact covariance does not fit inside the
            correlation matrix, or the split cannot be realized.
    """
    model = config.model
    n = model.n
    dt = config.bin_seconds
    g = assemble_impact_matrix(model)
    history = (config.burn_in_days + config.n_days) * config.bins_per_day
    weight = _daily_weight(model.kernel, config.flow_persistence, config.bins_per_day, history, dt)
    scales = config.flow_scales
    raw = g @ np.diag(scales**2) @ g * weight * dt * dt
    raw_share = np.trace(raw) / n
    if config.noise_share is None:
        level = 1.0
    elif raw_share == 0:
        if config.noise_share < 1.0:
            raise ConfigError("impact explains no variance; noise share must be 1")
        level = 1.0
    else:
        level = float(np.sqrt((1.0 - config.noise_share) / raw_share))
    d = raw * level**2
    d = 0.5 * (d + d.T)
    noise = model.correlation - d
    noise = 0.5 * (noise + noise.T)
    lo = np.linalg.eigvalsh(noise)[0]
    if lo < -1e-10 * n:
        raise ConfigError(
            f"impact covariance exceeds the correlation matrix (min noise eigenvalue {lo:.3e}); "
            "raise the noise share"
        )
    return VarianceSplit(level, d, noise)


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def generate_market(config: WorldConfig) -> MarketSeries:
    """Simulate prices and flows of a world.

    Returns a series in raw units: prices ``p = p0 + sigma * x`` in $ and
    flows ``v = q / sigma`` in shares per second. Identical configs give
    bit-identical output.
    """
    model = config.model
    n = model.n
    dt = config.bin_seconds
    split = variance_split(config)
    burn = config.burn_in_days * config.bins_per_day
    total = burn + config.n_bins
    flow_ss, noise_ss = np.random.SeedSequence(config.seed).spawn(2)
    flow_rng = np.random.default_rng(flow_ss)
    noise_rng = np.random.default_rng(noise_ss)

    a = config.flow_persistence
    shocks = flow_rng.standard_normal((n, total))
    start = flow_rng.standard_normal(n)
    u = signal.lfilter([np.sqrt(1 - a * a)], [1.0, -a], shocks, axis=1,
                       zi=(a * start)[:, None])[0]
    q = u * (split.flow_level * config.flow_scales)[:, None]
    if config.extra_flows is not None:
        q[:, burn:] += np.asarray(config.extra_flows, dtype=float)

    kern = eval_kernel(model.kernel, np.arange(total) * dt)
    conv = signal.fftconvolve(q, kern[None, :], axes=1)[:, :total] * dt
    x = np.zeros((n, total))
    x[:, 1:] = assemble_impact_matrix(model) @ conv[:, :-1]

    factor = _psd_factor(split.noise_covariance / config.bins_per_day)
    steps = factor @ noise_rng.standard_normal((n, total - 1))
    x[:, 1:] += np.cumsum(steps, axis=1)

    x, q = x[:, burn:], q[:, burn:]
    sigma = model.volatilities
    prices = config.initial_price + sigma[:, None] * x
    flows = q / sigma[:, None]
    return MarketSeries(model.instrument_ids, dt, prices, flows, flow_units="shares")


# ---------------------------------------------------------------- spectra


def marchenko_pastur_quantiles(count: int, ratio: float) -> np.ndarray:
    """Midpoint quantiles of a unit-variance Marchenko-Pastur law, descending."""
    if not 0 < ratio < 1:
        raise ConfigError(f"Marchenko-Pastur ratio must lie in (0, 1), got {ratio}")
    lo, hi = (1 - np.sqrt(ratio)) ** 2, (1 + np.sqrt(ratio)) ** 2
    grid = np.linspace(lo, hi, 20001)
    dens = np.sqrt(np.clip((hi - grid) * (grid - lo), 0.0, None)) / (2 * np.pi * ratio * grid)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
    cdf /= cdf[-1]
    probs = (np.arange(count) + 0.5) / count
    return np.interp(probs, cdf, grid)[::-1]


def market_plus_bulk_spectrum(n: int, top_ratio: float | None = None, mp_ratio: float = 0.5) -> np.ndarray:
    """One market mode on top of a Marchenko-Pastur bulk, summing to ``n``.

    Args:
        n: number of instruments, at least 2.
        top_ratio: top eigenvalue over the mean eigenvalue; defaults to
            ``max(0.3 n, 1 + n / 4)`` so the top mode clears the bulk for small n.
        mp_ratio: aspect ratio of the bulk.
    """
    if n < 2:
        raise ConfigError("a spectrum with a market mode needs n >= 2")
    top = max(0.3 * n, 1.0 + 0.25 * n) if top_ratio is None else float(top_ratio)
    if not 1.0 < top < n:
        raise ConfigError(f"top eigenvalue ratio must lie in (1, {n}), got {top}")
    bulk = marchenko_pastur_quantiles(n - 1, mp_ratio)
    bulk *= (n - top) / bulk.sum()
    if bulk[0] >= top:
        raise ConfigError("market mode does not separate from the bulk; raise top_ratio")
    return np.concatenate([[top], bulk])


def _unit_diagonal(mat: np.ndarray) -> np.ndarray:
    """Rotate a trace-n PSD matrix to unit diagonal without changing its spectrum.

    Each plane rotation between a diagonal entry below one and one above sets
    the first to exactly one, so at most ``n - 1`` rotations are needed.
    """
    m = mat.copy()
    n = m.shape[0]
    for _ in range(n):
        d = np.diag(m)
        lo = np.flatnonzero(d < 1 - 1e-12)
        hi = np.flatnonzero(d > 1 + 1e-12)
        if lo.size == 0 or hi.size == 0:
            break
        i, j = lo[0], hi[0]
        aii, ajj, aij = m[i, i], m[j, j], m[i, j]
        # tan of the angle solves (ajj - 1) t^2 - 2 aij t + (aii - 1) = 0
        disc = np.sqrt(aij * aij - (ajj - 1) * (aii - 1))
        t = (aii - 1) / (aij + np.copysign(disc, aij))
        c = 1.0 / np.sqrt(1 + t * t)
        rot = np.eye(n)
        rot[i, i] = rot[j, j] = c
        rot[i, j], rot[j, i] = c * t, -c * t
        m = rot.T @ m @ rot
    m = 0.5 * (m + m.T)
    np.fill_diagonal(m, 1.0)
    return m


def random_correlation_with_spectrum(eigenvalues, seed, market_aligned: bool = False) -> np.ndarray:
    """Random correlation matrix with exactly the given spectrum.

    With ``market_aligned`` the top eigenvector starts on the equal-weight
    portfolio and the rest span a random basis of its complement, so the
    top mode behaves like a market mode; otherwise all eigenvectors are random.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    lam = lam * lam.size / lam.sum()
    rng = np.random.default_rng(seed)
    if market_aligned:
        n = lam.size
        basis = np.column_stack([np.ones(n), rng.standard_normal((n, n - 1))])
        o, _ = np.linalg.qr(basis)
        rho = _unit_diagonal((o * lam) @ o.T)
    else:
        rho = stats.random_correlation.rvs(lam, random_state=rng)
    rho = 0.5 * (rho + rho.T)
    np.fill_diagonal(rho, 1.0)
    return rho


def default_market_risk(n: int, seed, median: float = 1e6, log_sd: float = 1.0) -> np.ndarray:
    """Log-normal cross-section of daily traded risk per instrument, in $."""
    rng = np.random.default_rng(seed)
    return median * np.exp(log_sd * rng.standard_normal(n))


# ---------------------------------------------------------------- biased orders


@dataclass(frozen=True)
class BiasedOrderConfig:
    """Random orders ``Q^i = eps^i * participation * Q_M^i`` with ``E[eps] = beta``."""

    beta: float
    participation: float
    market_risk: np.ndarray
    seed: int = 0

    def __post_init__(self):
        if not -1.0 <= self.beta <= 1.0:
            raise ConfigError(f"bias must lie in [-1, 1], got {self.beta}")
        if self.participation < 0:
            raise ConfigError("participation rate must be non-negative")
        qm = np.asarray(self.market_risk, dtype=float)
        if qm.ndim != 1 or np.any(qm < 0):
            raise ConfigError("market risk volumes must be a non-negative vector")
        object.__setattr__(self, "market_risk", qm)


def sample_biased_orders(config: BiasedOrderConfig, size: int | None = None,
                         rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw orders; shape ``(N,)`` or ``(size, N)``.

    Signs are independent with ``P(+1) = (1 + beta) / 2``.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    n = config.market_risk.size
    shape = (n,) if size is None else (size, n)
    signs = np.where(rng.random(shape) < 0.5 * (1.0 + config.beta), 1.0, -1.0)
    return signs * config.participation * config.market_risk


def expected_bias_cost(beta: float, model: PropagatorModel, market_risk, participation: float,
                       profile_norm: float) -> float:
    """Closed-form expected synchronous cost of a biased random order."""
    g = assemble_impact_matrix(model)
    qm = np.asarray(market_risk, dtype=float)
    b2 = beta * beta
    inner = (1 - b2) * np.sum(np.diag(g) * qm**2) + b2 * qm @ g @ qm
    return float(0.5 * participation**2 * profile_norm * inner)


def expected_risk_sq(beta: float, rho, market_risk, participation: float) -> float:
    """Expected squared risk ``E[Q^T rho Q]`` of a biased random order."""
    rho = np.asarray(rho, dtype=float)
    qm = np.asarray(market_risk, dtype=float)
    b2 = beta * beta
    inner = (1 - b2) * np.sum(np.diag(rho) * qm**2) + b2 * qm @ rho @ qm
    return float(participation**2 * inner)


def bias_cost_ratio_report(model: PropagatorModel, market_risk, betas, participations,
                           profile_norm: float | None = None, n_draws: int = 10_000,
                           seed: int = 0, relative_volatility: float = 0.02) -> list:
    """Expected and simulated cost of biased orders across ``beta`` and participation.

    Costs are synchronous optimal-execution costs. ``expected_cost_bps``
    divides by the expected traded notional, taken as risk over
    ``relative_volatility`` (daily volatility as a fraction of price).

    Returns:
        One dict per ``(participation, beta)`` with the analytic cost, its
        value in bps, the Monte-Carlo mean and standard error, the expected
        risk, the risk-normalized cost and the cost ratio to ``beta = 0``.
    """
    if profile_norm is None:
        profile_norm = solve_optimal_profile(model.kernel, TimeGrid()).norm
    qm = np.asarray(market_risk, dtype=float)
    if qm.shape != (model.n,):
        raise InputError(f"need {model.n} market risk volumes, got shape {qm.shape}")
    if n_draws < 2:
        raise ConfigError("need at least two Monte-Carlo draws")
    g = assemble_impact_matrix(model)
    rho = model.correlation
    streams = np.random.SeedSequence(seed).spawn(len(participations) * len(betas))
    rows = []
    k = 0
    for part in participations:
        base = expected_bias_cost(0.0, model, qm, part, profile_norm)
        for beta in betas:
            cfg = BiasedOrderConfig(float(beta), float(part), qm)
            orders = sample_biased_orders(cfg, n_draws, rng=np.random.default_rng(streams[k]))
            k += 1
            costs = 0.5 * profile_norm * np.einsum("di,ij,dj->d", orders, g, orders)
            cost = expected_bias_cost(beta, model, qm, part, profile_norm)
            risk = np.sqrt(expected_risk_sq(beta, rho, qm, part))
            notional = part * qm.sum() / relative_volatility
            rows.append({
                "beta": float(beta),
                "participation": float(part),
                "expected_cost": cost,
                "expected_cost_bps": cost / notional * 1e4 if notional > 0 else 0.0,
                "mc_mean_cost": float(costs.mean()),
                "mc_standard_error": float(costs.std(ddof=1) / np.sqrt(n_draws)),
                "expected_risk": float(risk),
                "risk_normalized_cost": cost / risk if risk > 0 else 0.0,
                "cost_ratio_to_unbiased": cost / base if base > 0 else float("nan"),
            })
    return rows


# ---------------------------------------------------------------- config documents


def build_world(doc: dict) -> WorldConfig:
    """Build a world from a JSON-style document; unspecified keys take defaults.

    Keys: ``n_assets`` (10), ``seed`` (0), ``n_days``, ``bins_per_day``,
    ``bin_seconds``, ``burn_in_days``, ``noise_share``, ``flow_persistence``,
    ``flow_scale``, ``initial_price``, ``kernel`` ({alpha, tau0_seconds}),
    ``correlation`` (matrix; otherwise drawn from a market-plus-bulk spectrum with
    ``top_ratio``, ``mp_ratio`` and ``market_aligned`` (True)), ``mode_liquidities`` (otherwise
    ``top_liquidity`` and ``liquidity_exponent`` define a power law),
    ``volatilities`` and ``instrument_ids``.
    """
    known = {"n_assets", "seed", "n_days", "bins_per_day", "bin_seconds", "burn_in_days",
             "noise_share", "flow_persistence", "flow_scale", "initial_price", "kernel",
             "correlation", "top_ratio", "mp_ratio", "market_aligned", "mode_liquidities", "top_liquidity",
             "liquidity_exponent", "volatilities", "instrument_ids"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown world config keys: {sorted(unknown)}")
    seed = int(doc.get("seed", 0))
    # separate from the generation streams, which use the first spawned children
    corr_ss = np.random.SeedSequence(seed, spawn_key=(1000,))
    if "correlation" in doc:
        rho = np.asarray(doc["correlation"], dtype=float)
    else:
        n = int(doc.get("n_assets", 10))
        spec = market_plus_bulk_spectrum(n, doc.get("top_ratio"), float(doc.get("mp_ratio", 0.5)))
        rho = random_correlation_with_spectrum(spec, corr_ss, bool(doc.get("market_aligned", True)))
    kernel = DecayKernel.from_dict(doc.get("kernel", {"alpha": 0.2, "tau0_seconds": 90.0}))
    lam = np.linalg.eigvalsh(rho)[::-1]
    if "mode_liquidities" in doc:
        g = doc["mode_liquidities"]
    else:
        g = power_law_liquidities(np.clip(lam, 0.0, None),
                                  float(doc.get("top_liquidity", DEFAULT_TOP_LIQUIDITY)),
                                  float(doc.get("liquidity_exponent", -0.5)))
    try:
        model = model_from_correlation(rho, g, kernel, doc.get("volatilities"), doc.get("instrument_ids"))
    except InputError as exc:
        raise ConfigError(str(exc)) from None
    return WorldConfig(
        model=model,
        flow_scale=doc.get("flow_scale", 1.0),
        flow_persistence=float(doc.get("flow_persistence", 0.8)),
        noise_share=doc.get("noise_share", 0.9),
        n_days=int(doc.get("n_days", 250)),
        bins_per_day=int(doc.get("bins_per_day", 96)),
        bin_seconds=float(doc.get("bin_seconds", 300.0)),
        seed=seed,
        burn_in_days=int(doc.get("burn_in_days", 20)),
        initial_price=float(doc.get("initial_price", 100.0)),
    )
