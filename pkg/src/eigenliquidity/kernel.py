"""Temporal decay kernel of the propagator and its discretization.

The kernel is ``phi(tau) = (1 + tau/tau0)**(-alpha)`` for ``tau >= 0`` and
zero for negative lags. Cost integrals are discretized with the midpoint
rule on a uniform grid covering one trading session.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigError

DEFAULT_HORIZON_SECONDS = 8 * 3600.0
DEFAULT_N_BINS = 96
PSD_TOLERANCE = 1e-10


@dataclass(frozen=True)
class DecayKernel:
    """Power-law decay ``(1 + tau/tau0)**(-alpha)``.

    Attributes:
        alpha: decay exponent, strictly positive.
        tau0: time offset in seconds, strictly positive.
    """

    alpha: float
    tau0: float

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise ConfigError(f"kernel alpha must be > 0, got {self.alpha}")
        if not (np.isfinite(self.tau0) and self.tau0 > 0):
            raise ConfigError(f"kernel tau0 must be > 0 seconds, got {self.tau0}")

    def __call__(self, tau):
        return eval_kernel(self, tau)

    def to_dict(self) -> dict:
        return {"alpha": float(self.alpha), "tau0_seconds": float(self.tau0)}

    @classmethod
    def from_dict(cls, data: dict) -> "DecayKernel":
        try:
            return cls(alpha=float(data["alpha"]), tau0=float(data["tau0_seconds"]))
        except KeyError as exc:
            raise ConfigError(f"kernel object is missing field {exc}") from None


DEFAULT_KERNEL = DecayKernel(alpha=0.2, tau0=90.0)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid of ``n_bins`` bins over ``[0, horizon]`` seconds."""

    horizon: float = DEFAULT_HORIZON_SECONDS
    n_bins: int = DEFAULT_N_BINS

    def __post_init__(self):
        if int(self.n_bins) != self.n_bins or self.n_bins < 2:
            raise ConfigError(f"grid needs an integer n_bins >= 2, got {self.n_bins}")
        if not (np.isfinite(self.horizon) and self.horizon > 0):
            raise ConfigError(f"grid horizon must be > 0 seconds, got {self.horizon}")
        object.__setattr__(self, "n_bins", int(self.n_bins))

    @property
    def dt(self) -> float:
        return self.horizon / self.n_bins

    @cached_property
    def midpoints(self) -> np.ndarray:
        return (np.arange(self.n_bins) + 0.5) * self.dt

    def to_dict(self) -> dict:
        return {"horizon_seconds": float(self.horizon), "n_bins": int(self.n_bins)}

    @classmethod
    def from_dict(cls, data: dict) -> "TimeGrid":
        try:
            return cls(horizon=float(data["horizon_seconds"]), n_bins=int(data["n_bins"]))
        except KeyError as exc:
            raise ConfigError(f"grid object is missing field {exc}") from None


def eval_kernel(kernel: DecayKernel, tau):
    """Evaluate the causal decay kernel at lag(s) ``tau`` (seconds).

    Returns a float for scalar input and an array otherwise. Negative lags
    give exactly zero and ``tau = 0`` gives exactly one.
    """
    tau_arr = np.asarray(tau, dtype=float)
    pos = np.maximum(tau_arr, 0.0)
    out = np.where(tau_arr >= 0, (1.0 + pos / kernel.tau0) ** (-kernel.alpha), 0.0)
    if out.ndim == 0:
        return float(out)
    return out


def eval_kernel_derivative(kernel: DecayKernel, tau, dtau: float):
    """Forward difference ``[phi(tau + dtau) - phi(tau)] / dtau`` (per second)."""
    if not dtau > 0:
        raise ConfigError(f"dtau must be > 0, got {dtau}")
    tau_arr = np.asarray(tau, dtype=float)
    out = (eval_kernel(kernel, tau_arr + dtau) - eval_kernel(kernel, tau_arr)) / dtau
    if np.ndim(out) == 0:
        return float(out)
    return out


def build_kernel_matrix(kernel: DecayKernel, grid: TimeGrid) -> np.ndarray:
    """Midpoint-rule kernel matrix ``M[k, l] = phi(|t_k - t_l|) * dt**2``.

    ``q @ M @ q`` is the kernel-weighted double integral of a rate profile
    ``q`` sampled at the bin midpoints.
    """
    if grid.n_bins < 2:
        raise ConfigError("kernel matrix needs at least two bins")
    lags = np.arange(grid.n_bins) * grid.dt
    col = eval_kernel(kernel, lags) * grid.dt**2
    idx = np.arange(grid.n_bins)
    return col[np.abs(idx[:, None] - idx[None, :])]


def kernel_norm(profile: np.ndarray, kernel: DecayKernel, grid: TimeGrid) -> float:
    """Kernel-weighted squared norm ``psi @ M @ psi`` of a rate profile."""
    m = build_kernel_matrix(kernel, grid)
    p = np.asarray(profile, dtype=float)
    return float(p @ m @ p)


def min_eigenvalue_ratio(matrix: np.ndarray) -> float:
    """Smallest eigenvalue of a symmetric matrix divided by its trace."""
    m = np.asarray(matrix, dtype=float)
    tr = np.trace(m)
    return float(np.linalg.eigvalsh(m)[0] / tr) if tr != 0 else 0.0
