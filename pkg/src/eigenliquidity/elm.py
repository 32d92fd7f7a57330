"""Propagator model whose impact matrix is aligned with the correlation matrix.

The impact matrix shares the eigenvectors of the correlation matrix:
``G = O diag(Lambda * g) O^T``. The model is stored in this factored form
and ``G`` is assembled on demand, so symmetry and fragmentation invariance
hold by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError
from .kernel import DEFAULT_KERNEL, DecayKernel
from .spectral import EigenStructure, decompose

MANIPULATION_TOL = 1e-10


@dataclass(frozen=True)
class PropagatorModel:
    """Factored cross-impact model.

    Attributes:
        eigen: eigen-structure of the correlation matrix.
        liquidities: per-mode impact coefficients ``g^a`` (1/$ of risk).
        kernel: shared temporal decay kernel.
        volatilities: daily dollar volatilities per instrument, used only to
            convert between share and risk units at the edges.
        instrument_ids: optional labels.
    """

    eigen: EigenStructure
    liquidities: np.ndarray
    kernel: DecayKernel = DEFAULT_KERNEL
    volatilities: np.ndarray = field(default=None)
    instrument_ids: tuple = field(default=None)

    def __post_init__(self):
        g = np.asarray(self.liquidities, dtype=float)
        n = self.eigen.n
        if g.shape != (n,):
            raise InputError(f"need {n} mode liquidities, got shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise InputError("mode liquidities must be finite")
        vols = np.ones(n) if self.volatilities is None else np.asarray(self.volatilities, dtype=float)
        if vols.shape != (n,):
            raise InputError(f"need {n} volatilities, got shape {vols.shape}")
        ids = (
            tuple(f"S{i}" for i in range(n))
            if self.instrument_ids is None
            else tuple(str(s) for s in self.instrument_ids)
        )
        if len(ids) != n:
            raise InputError(f"need {n} instrument ids, got {len(ids)}")
        object.__setattr__(self, "liquidities", g)
        object.__setattr__(self, "volatilities", vols)
        object.__setattr__(self, "instrument_ids", ids)

    @property
    def n(self) -> int:
        return self.eigen.n

    @property
    def correlation(self) -> np.ndarray:
        return self.eigen.reconstruct()

    @property
    def impact_eigenvalues(self) -> np.ndarray:
        """Eigenvalues ``Lambda^a g^a`` of the assembled impact matrix."""
        return self.eigen.values * self.liquidities

    @property
    def impact_matrix(self) -> np.ndarray:
        return assemble_impact_matrix(self)

    def with_liquidities(self, g) -> "PropagatorModel":
        return PropagatorModel(self.eigen, np.asarray(g, dtype=float), self.kernel,
                               self.volatilities, self.instrument_ids)

    def to_dict(self) -> dict:
        return {
            "instrument_ids": list(self.instrument_ids),
            "eigenvectors": self.eigen.vectors.tolist(),
            "eigenvalues": self.eigen.values.tolist(),
            "mode_liquidities": self.liquidities.tolist(),
            "kernel": self.kernel.to_dict(),
            "volatilities": self.volatilities.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PropagatorModel":
        try:
            eigen = EigenStructure(
                vectors=np.array(data["eigenvectors"], dtype=float),
                values=np.array(data["eigenvalues"], dtype=float),
            )
            return cls(
                eigen=eigen,
                liquidities=np.array(data["mode_liquidities"], dtype=float),
                kernel=DecayKernel.from_dict(data["kernel"]),
                volatilities=data.get("volatilities"),
                instrument_ids=data.get("instrument_ids"),
            )
        except KeyError as exc:
            raise InputError(f"model document is missing field {exc}") from None


def model_from_correlation(rho, liquidities, kernel: DecayKernel = DEFAULT_KERNEL,
                           volatilities=None, instrument_ids=None) -> PropagatorModel:
    """Decompose ``rho`` and attach per-mode liquidities (descending-eigenvalue order)."""
    eigen = decompose(rho)
    g = np.broadcast_to(np.asarray(liquidities, dtype=float), (eigen.n,)).copy()
    # zero-risk modes never contribute; keep g = 0 there by convention
    g[eigen.values == 0] = 0.0
    return PropagatorModel(eigen, g, kernel, volatilities, instrument_ids)


def power_law_liquidities(eigenvalues, top_liquidity: float, exponent: float = -0.5) -> np.ndarray:
    """``g^a = (1/top_liquidity) * (Lambda^a / Lambda^1)**exponent``; zero where Lambda is zero."""
    lam = np.asarray(eigenvalues, dtype=float)
    g = np.zeros_like(lam)
    pos = lam > 0
    g[pos] = (lam[pos] / lam[0]) ** exponent / top_liquidity
    return g


def two_asset_model(rho_hat: float, g_abs: float, g_rel: float,
                    kernel: DecayKernel = DEFAULT_KERNEL) -> PropagatorModel:
    """Two stocks with correlation ``rho_hat`` and absolute/relative mode liquidities.

    Mode 0 is the absolute mode ``(1, 1)/sqrt(2)`` with eigenvalue ``1 + rho_hat``
    and mode 1 the relative mode ``(1, -1)/sqrt(2)`` with eigenvalue ``1 - rho_hat``.
    """
    if not -1.0 <= rho_hat <= 1.0:
        raise ConfigError(f"correlation must lie in [-1, 1], got {rho_hat}")
    s = 1.0 / math.sqrt(2.0)
    vectors = np.array([[s, s], [s, -s]])
    values = np.array([1.0 + rho_hat, 1.0 - rho_hat])
    g = np.array([g_abs, g_rel], dtype=float)
    if rho_hat < 0:
        # keep descending order: the relative mode is the larger one
        vectors, values, g = vectors[:, ::-1].copy(), values[::-1].copy(), g[::-1].copy()
    return PropagatorModel(EigenStructure(vectors, values), g, kernel)


def assemble_impact_matrix(model: PropagatorModel) -> np.ndarray:
    """``G[i, j] = sum_a O[i, a] Lambda^a g^a O[j, a]``, exactly symmetric."""
    g = model.liquidities
    if np.any(g < 0):
        bad = np.flatnonzero(g < 0).tolist()
        raise ConfigError(f"negative mode liquidities on modes {bad}; G would not be PSD")
    o = model.eigen.vectors
    mat = (o * (model.eigen.values * g)) @ o.T
    return 0.5 * (mat + mat.T)


@dataclass(frozen=True)
class ManipulationReport:
    passed: bool
    min_liquidity: float
    min_liquidity_mode: int
    min_impact_eigenvalue: float
    offending_modes: tuple

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "min_mode_liquidity": self.min_liquidity,
            "min_mode_liquidity_index": self.min_liquidity_mode,
            "min_impact_eigenvalue": self.min_impact_eigenvalue,
            "offending_modes": list(self.offending_modes),
        }


def check_no_manipulation(model: PropagatorModel) -> ManipulationReport:
    """Diagnose whether the symmetric cost is free of price manipulation.

    Passes iff every ``g^a`` and every eigenvalue of the assembled impact
    matrix is at least ``-1e-10`` times the respective maximum magnitude.
    Works on models with negative ``g^a`` (which ``assemble_impact_matrix``
    refuses) by assembling the matrix directly.
    """
    g = model.liquidities
    o = model.eigen.vectors
    mat = (o * (model.eigen.values * g)) @ o.T
    eig_g = np.linalg.eigvalsh(0.5 * (mat + mat.T))
    g_scale = max(float(np.max(np.abs(g))), np.finfo(float).tiny)
    e_scale = max(float(np.max(np.abs(eig_g))), np.finfo(float).tiny)
    offending = tuple(int(a) for a in np.flatnonzero(g < -MANIPULATION_TOL * g_scale))
    passed = not offending and eig_g[0] >= -MANIPULATION_TOL * e_scale
    return ManipulationReport(
        passed=bool(passed),
        min_liquidity=float(g.min()),
        min_liquidity_mode=int(np.argmin(g)),
        min_impact_eigenvalue=float(eig_g[0]),
        offending_modes=offending,
    )


def liquidity_spectrum(model: PropagatorModel) -> list:
    """Rows ``(Lambda^a, g^a, 1/g^a)`` by descending eigenvalue.

    Modes with ``g^a == 0`` report ``math.inf`` liquidity.
    """
    order = np.argsort(-model.eigen.values, kind="stable")
    rows = []
    for a in order:
        g = float(model.liquidities[a])
        rows.append((float(model.eigen.values[a]), g, math.inf if g == 0 else 1.0 / g))
    return rows


def average_offdiagonal(impact) -> float:
    """Mean of the off-diagonal entries of a square matrix."""
    mat = np.asarray(impact, dtype=float)
    n = mat.shape[0]
    if n < 2:
        raise InputError("average off-diagonal needs N >= 2")
    return float(mat[~np.eye(n, dtype=bool)].mean())


def remove_market_mode(impact) -> np.ndarray:
    """Subtract the average off-diagonal value from the off-diagonal entries only."""
    mat = np.array(impact, dtype=float)
    gbar = average_offdiagonal(mat)
    off = ~np.eye(mat.shape[0], dtype=bool)
    mat[off] -= gbar
    return mat


def model_invariants(model: PropagatorModel, tol: float = 1e-8) -> dict:
    """Structural checks on a model; maps check name to pass/fail."""
    o = model.eigen.vectors
    n = model.n
    lam = model.eigen.values
    rho = model.correlation
    mat = (o * (lam * model.liquidities)) @ o.T
    return {
        "orthonormal_eigenvectors": bool(np.max(np.abs(o.T @ o - np.eye(n))) <= tol),
        "nonnegative_eigenvalues": bool(lam.min() >= -tol),
        "descending_eigenvalues": bool(np.all(np.diff(lam) <= tol)),
        "trace_equals_n": bool(abs(lam.sum() - n) <= tol * n),
        "unit_diagonal_correlation": bool(np.max(np.abs(np.diag(rho) - 1.0)) <= 1e-3),
        "symmetric_impact": bool(np.max(np.abs(mat - mat.T)) <= tol * max(np.abs(mat).max(), 1e-300)),
        "no_manipulation": check_no_manipulation(model).passed,
        "positive_volatilities": bool(np.all(model.volatilities > 0)),
    }
