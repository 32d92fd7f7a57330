"""Execution cost and risk functionals.

Schedules are per-asset risk-trading rates (dollars of risk per second) at
the midpoints of a uniform grid. The cost of a schedule under a factored
model is

    C = 1/2 * sum_{k,l} q(t_k)^T G q(t_l) phi(|t_k - t_l|) dt^2,

which equals the per-mode sum ``1/2 * sum_a g^a ||q~^a||^2`` with
``q~ = (rho^{1/2})^T q``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .elm import PropagatorModel, assemble_impact_matrix
from .errors import InputError
from .kernel import TimeGrid, build_kernel_matrix
from .spectral import EigenStructure, sqrt_correlation

TOTALS_RTOL = 1e-9
TOTALS_ATOL = 1e-12


@dataclass(frozen=True)
class ExecutionSchedule:
    """Per-asset trading rates on a time grid.

    ``rates`` has shape ``(N, n_bins)``. ``totals`` is derived from the rates
    when omitted; when given it must agree with them.
    """

    grid: TimeGrid
    rates: np.ndarray
    totals: np.ndarray = field(default=None)
    instrument_ids: tuple = field(default=None)

    def __post_init__(self):
        rates = np.atleast_2d(np.asarray(self.rates, dtype=float))
        if rates.shape[1] != self.grid.n_bins:
            raise InputError(
                f"schedule has {rates.shape[1]} bins but the grid has {self.grid.n_bins}"
            )
        if not np.all(np.isfinite(rates)):
            raise InputError("schedule rates must be finite")
        computed = rates.sum(axis=1) * self.grid.dt
        if self.totals is not None:
            totals = np.asarray(self.totals, dtype=float)
            if totals.shape != computed.shape or np.any(
                np.abs(totals - computed) > TOTALS_RTOL * np.abs(totals) + TOTALS_ATOL
            ):
                raise InputError("schedule totals do not match the integrated rates")
        ids = self.instrument_ids
        if ids is not None:
            ids = tuple(str(s) for s in ids)
            if len(ids) != rates.shape[0]:
                raise InputError("instrument id count does not match schedule rows")
        object.__setattr__(self, "rates", rates)
        object.__setattr__(self, "totals", computed)
        object.__setattr__(self, "instrument_ids", ids)

    @property
    def n_assets(self) -> int:
        return self.rates.shape[0]

    def scaled(self, factor: float) -> "ExecutionSchedule":
        return ExecutionSchedule(self.grid, self.rates * factor, instrument_ids=self.instrument_ids)


def synchronous_schedule(targets, profile, grid: TimeGrid, instrument_ids=None) -> ExecutionSchedule:
    """``rates[i, k] = Q^i * psi(t_k)`` for a profile normalized to unit total."""
    q = np.asarray(targets, dtype=float).reshape(-1, 1)
    return ExecutionSchedule(grid, q * np.asarray(profile, dtype=float)[None, :],
                             instrument_ids=instrument_ids)


def _check_dims(schedule: ExecutionSchedule, n: int):
    if schedule.n_assets != n:
        raise InputError(f"schedule has {schedule.n_assets} assets, model has {n}")


def portfolio_risk(positions, rho) -> float:
    """Risk ``sqrt(Q^T rho Q)`` of terminal risk positions."""
    q = np.atleast_1d(np.asarray(positions, dtype=float))
    rho = np.atleast_2d(np.asarray(rho, dtype=float))
    if rho.shape != (q.size, q.size):
        raise InputError(f"position length {q.size} does not match correlation {rho.shape}")
    return float(np.sqrt(max(q @ rho @ q, 0.0)))


def schedule_cost(schedule: ExecutionSchedule, model: PropagatorModel) -> float:
    """Expected impact cost of a schedule, in dollars."""
    _check_dims(schedule, model.n)
    m = build_kernel_matrix(model.kernel, schedule.grid)
    g = assemble_impact_matrix(model)
    inner = schedule.rates @ m @ schedule.rates.T
    return float(0.5 * np.sum(g * inner))


def project_to_modes(schedule: ExecutionSchedule, eigen: EigenStructure) -> np.ndarray:
    """Mode-space rates ``q~^a(t_k) = sqrt(Lambda^a) sum_i O[i, a] q^i(t_k)``."""
    _check_dims(schedule, eigen.n)
    return sqrt_correlation(eigen).T @ schedule.rates


@dataclass(frozen=True)
class EigenCost:
    total: float
    per_mode: np.ndarray
    mode_norms: np.ndarray


def eigencost(schedule: ExecutionSchedule, model: PropagatorModel) -> EigenCost:
    """Cost split into per-mode terms ``1/2 g^a ||q~^a||^2``."""
    _check_dims(schedule, model.n)
    if np.any(model.liquidities < 0):
        raise InputError("eigencost requires non-negative mode liquidities")
    m = build_kernel_matrix(model.kernel, schedule.grid)
    qt = project_to_modes(schedule, model.eigen)
    norms = np.einsum("ak,kl,al->a", qt, m, qt)
    terms = 0.5 * model.liquidities * norms
    return EigenCost(total=float(np.sum(terms)), per_mode=terms, mode_norms=norms)


def fragmentation_shift(schedule: ExecutionSchedule, i: int, j: int, delta) -> ExecutionSchedule:
    """Move the rate profile ``delta`` from instrument ``j`` to instrument ``i``."""
    n = schedule.n_assets
    if not (0 <= i < n and 0 <= j < n):
        raise InputError(f"instrument indices ({i}, {j}) out of range for {n} assets")
    if i == j:
        raise InputError("fragmentation shift needs two distinct instruments")
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (schedule.grid.n_bins,):
        raise InputError("shift profile must have one value per bin")
    rates = schedule.rates.copy()
    rates[i] += delta
    rates[j] -= delta
    return ExecutionSchedule(schedule.grid, rates, instrument_ids=schedule.instrument_ids)


def round_trip_cost(schedule: ExecutionSchedule, model: PropagatorModel, rtol: float = 1e-9) -> float:
    """Cost of a schedule whose every per-asset total is zero."""
    scale = np.abs(schedule.rates).sum(axis=1).max() * schedule.grid.dt
    if np.any(np.abs(schedule.totals) > rtol * scale + TOTALS_ATOL):
        raise InputError("round trip schedules must have zero net volume on every asset")
    return schedule_cost(schedule, model)


def cost_in_bps(cost: float, notional: float) -> float:
    """Cost in basis points of the traded notional."""
    if notional <= 0:
        raise InputError("notional must be positive")
    return cost / notional * 1e4
