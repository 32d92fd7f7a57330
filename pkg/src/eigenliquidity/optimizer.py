"""Cost-optimal execution.

The single-profile problem ``min psi^T M psi`` subject to
``sum(psi) * dt = 1`` has the solution ``psi* ~ M^{-1} 1``. Under a factored
model with a shared kernel the portfolio optimum is synchronous,
``q(t) = Q psi*(t)``; ``solve_general_kkt`` solves the coupled problem
without that assumption and serves as a cross-check.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .cost import ExecutionSchedule, synchronous_schedule
from .elm import PropagatorModel, assemble_impact_matrix, check_no_manipulation
from .errors import ConfigError, DegenerateTargetWarning, InputError, NumericalError
from .kernel import DecayKernel, TimeGrid, build_kernel_matrix
from .spectral import sqrt_correlation


RIDGE = 1e-12
MAX_KKT_UNKNOWNS = 4000
NORMALIZATION_TOL = 1e-6


@dataclass(frozen=True)
class OptimalProfile:
    """Optimal unit-total rate profile psi*(t_k), in 1/seconds."""

    grid: TimeGrid
    psi: np.ndarray
    norm: float  # psi @ M @ psi


def _constraint_nullspace(n: int) -> np.ndarray:
    # Householder reflection sending ones/sqrt(n) to e1; its other columns span sum-zero vectors
    u = np.full(n, 1.0 / np.sqrt(n))
    u[0] -= 1.0
    h = np.eye(n) - 2.0 * np.outer(u, u) / (u @ u)
    return h[:, 1:]


def solve_optimal_profile(kernel: DecayKernel, grid: TimeGrid) -> OptimalProfile:
    """Minimize ``psi^T M psi`` subject to unit total.

    The objective carries a ridge of ``1e-12 * trace(M) / n``, so the
    answer is ``(M + ridge I)^{-1} 1`` normalized. It is computed as the
    flat profile plus a correction in the sum-zero subspace: the all-ones
    direction, where ``M`` is nearly singular for slowly decaying kernels,
    never enters the factorization. A constant kernel gives the flat profile.
    """
    m = build_kernel_matrix(kernel, grid)
    n = grid.n_bins
    z = _constraint_nullspace(n)
    flat = np.full(n, 1.0 / grid.horizon)
    # z annihilates constant matrices, so removing the floor of m is exact and avoids cancellation
    shifted = m - m.min()
    reduced = z.T @ shifted @ z + RIDGE * np.trace(m) / n * np.eye(n - 1)
    try:
        factor = linalg.cho_factor(0.5 * (reduced + reduced.T), lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"kernel matrix is numerically singular: {exc}") from None
    psi = flat - z @ linalg.cho_solve(factor, z.T @ (shifted @ flat))
    psi = 0.5 * (psi + psi[::-1])  # exact time symmetry of the symmetric kernel
    psi /= psi.sum() * grid.dt
    return OptimalProfile(grid=grid, psi=psi, norm=float(psi @ m @ psi))


def optimal_portfolio_schedule(targets, model: PropagatorModel, grid: TimeGrid,
                               profile: OptimalProfile | None = None) -> ExecutionSchedule:
    """Synchronous optimum ``rates[i, k] = Q^i psi*(t_k)``."""
    q = np.asarray(targets, dtype=float)
    if q.shape != (model.n,):
        raise InputError(f"need {model.n} targets, got shape {q.shape}")
    report = check_no_manipulation(model)
    if not report.passed:
        raise ConfigError(f"model admits price manipulation (modes {list(report.offending_modes)})")
    _warn_zero_mode_targets(q, model)
    profile = profile or solve_optimal_profile(model.kernel, grid)
    return synchronous_schedule(q, profile.psi, grid, instrument_ids=model.instrument_ids)


def synchronous_cost(targets, model: PropagatorModel, profile: OptimalProfile) -> float:
    """Closed form ``sum_a 1/2 g^a (Q~^a)^2 ||psi*||^2`` with ``Q~ = (rho^{1/2})^T Q``."""
    qt = sqrt_correlation(model.eigen).T @ np.asarray(targets, dtype=float)
    return float(0.5 * np.sum(model.liquidities * qt**2) * profile.norm)


def _warn_zero_mode_targets(q: np.ndarray, model: PropagatorModel):
    zero = model.eigen.values == 0
    if not zero.any():
        return
    proj = model.eigen.vectors[:, zero].T @ q
    if np.any(np.abs(proj) > 1e-12 * max(np.abs(q).max(), 1.0)):
        warnings.warn(
            "target has a component on a zero-risk mode; the cost is flat along it "
            "and the returned schedule is one of many optima",
            DegenerateTargetWarning,
            stacklevel=3,
        )


def solve_general_kkt(targets, model: PropagatorModel, grid: TimeGrid) -> ExecutionSchedule:
    """Solve ``min vec(q)^T (G kron M) vec(q)`` with per-asset totals fixed.

    No synchronicity is assumed. When the KKT matrix is singular (zero-risk
    modes) the minimum-norm least-squares solution is returned and a
    ``DegenerateTargetWarning`` is issued.
    """
    q = np.asarray(targets, dtype=float)
    n, nb = model.n, grid.n_bins
    if q.shape != (n,):
        raise InputError(f"need {n} targets, got shape {q.shape}")
    if n * nb > MAX_KKT_UNKNOWNS:
        raise ConfigError(f"KKT system with {n * nb} unknowns exceeds {MAX_KKT_UNKNOWNS}")
    g = assemble_impact_matrix(model)
    m = build_kernel_matrix(model.kernel, grid)
    hess = np.kron(g, m)
    cons = np.kron(np.eye(n), np.full((1, nb), grid.dt))
    kkt = np.block([[hess, cons.T], [cons, np.zeros((n, n))]])
    rhs = np.concatenate([np.zeros(n * nb), q])
    singular = np.any(model.eigen.values * model.liquidities == 0) and n > 1
    if not singular:
        try:
            sol = linalg.solve(kkt, rhs, assume_a="sym")
        except (linalg.LinAlgError, linalg.LinAlgWarning):
            singular = True
    if singular:
        warnings.warn("KKT system is singular; returning the minimum-norm optimum",
                      DegenerateTargetWarning, stacklevel=2)
        sol = linalg.lstsq(kkt, rhs)[0]
    rates = sol[: n * nb].reshape(n, nb)
    return ExecutionSchedule(grid, rates, instrument_ids=model.instrument_ids)


def standard_profiles(grid: TimeGrid, midday_window: float = 7200.0) -> dict:
    """Reference unit-total profiles: flat day, flat window around midday, linear ramp.

    The midday profile spreads volume over ``[T/2 - w/2, T/2 + w/2]``, weighting
    each bin by its overlap with that window. The linear profile is
    ``2 t / T**2``, zero at the open and largest at the close.
    """
    t_mid = grid.midpoints
    T, dt = grid.horizon, grid.dt
    if not 0 < midday_window <= T:
        raise ConfigError("midday window must fit inside the horizon")
    lo, hi = 0.5 * (T - midday_window), 0.5 * (T + midday_window)
    left = t_mid - 0.5 * dt
    overlap = np.clip(np.minimum(left + dt, hi) - np.maximum(left, lo), 0.0, None)
    flat_mid = overlap / midday_window / dt
    return {
        "flat_day": np.full(grid.n_bins, 1.0 / T),
        "flat_midday": flat_mid,
        "linear_increasing": 2.0 * t_mid / T**2,
    }


def profile_cost_comparison(profiles: dict, kernel: DecayKernel, grid: TimeGrid) -> list:
    """Relative cost ``cost(psi) / cost(psi*) - 1`` of each named profile.

    The optimal profile is always included under the name ``optimal``.
    Rows are ``(name, kernel_norm, relative_cost)``.
    """
    m = build_kernel_matrix(kernel, grid)
    best = solve_optimal_profile(kernel, grid)
    rows = [("optimal", best.norm, 0.0)]
    for name, psi in profiles.items():
        psi = np.asarray(psi, dtype=float)
        if psi.shape != (grid.n_bins,):
            raise InputError(f"profile {name!r} has {psi.size} values for {grid.n_bins} bins")
        total = psi.sum() * grid.dt
        if abs(total - 1.0) > NORMALIZATION_TOL:
            raise InputError(f"profile {name!r} integrates to {total:.6g}, not 1")
        norm = float(psi @ m @ psi)
        rows.append((name, norm, norm / best.norm - 1.0))
    return rows
