"""Eigen-structure of correlation matrices.

Decomposition ``rho = O diag(Lambda) O^T`` with a deterministic sign
convention, eigenvalue clipping, the square root ``O diag(sqrt(Lambda))``
and the uncorrelated unit-risk eigen-portfolios ``O diag(Lambda**-0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NumericalError

SYMMETRY_TOL = 1e-10
PSD_TOL = 1e-10
DEFAULT_RELATIVE_FLOOR = 1e-4


def validate_correlation(rho, tol: float = PSD_TOL) -> np.ndarray:
    """Check that ``rho`` is a correlation matrix and return it as an array.

    Requires a square symmetric matrix with unit diagonal, entries bounded
    by one in magnitude and eigenvalues above ``-tol * N``.
    """
    rho = np.array(rho, dtype=float)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1] or rho.shape[0] == 0:
        raise InputError(f"correlation matrix must be square, got shape {rho.shape}")
    if not np.all(np.isfinite(rho)):
        raise InputError("correlation matrix has non-finite entries")
    n = rho.shape[0]
    if np.max(np.abs(rho - rho.T)) > SYMMETRY_TOL:
        raise InputError("correlation matrix is not symmetric")
    if np.max(np.abs(np.diag(rho) - 1.0)) > tol:
        raise InputError("correlation matrix must have a unit diagonal")
    if np.max(np.abs(rho)) > 1.0 + tol:
        raise InputError("correlation entries must lie in [-1, 1]")
    if np.linalg.eigvalsh(0.5 * (rho + rho.T))[0] < -tol * n:
        raise InputError("correlation matrix is not positive semidefinite")
    return 0.5 * (rho + rho.T)


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    # largest-magnitude entry positive; near-ties go to the lowest index
    out = vectors.copy()
    for a in range(out.shape[1]):
        col = out[:, a]
        mag = np.abs(col)
        pivot = int(np.flatnonzero(mag >= mag.max() * (1.0 - 1e-9))[0])
        if col[pivot] < 0:
            out[:, a] = -col
    return out


@dataclass(frozen=True)
class EigenStructure:
    """Eigenvectors (columns of ``vectors``) and descending eigenvalues.

    ``clipped`` marks modes that were raised to the cleaning floor; those
    carry no usable information and calibration skips them.
    """

    vectors: np.ndarray
    values: np.ndarray
    clipped: np.ndarray = field(default=None)

    def __post_init__(self):
        vecs = np.asarray(self.vectors, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if vecs.ndim != 2 or vecs.shape[0] != vecs.shape[1] or vals.shape != (vecs.shape[0],):
            raise InputError("eigenvectors must be N x N and eigenvalues length N")
        clipped = (
            np.zeros(vals.shape, dtype=bool)
            if self.clipped is None
            else np.asarray(self.clipped, dtype=bool)
        )
        object.__setattr__(self, "vectors", vecs)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "clipped", clipped)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T


def decompose(rho) -> EigenStructure:
    """Eigen-decompose a correlation matrix.

    Eigenvalues come back sorted in descending order. Round-off negatives
    and numerical zeros (``|Lambda| <= 1e-12 * N``) are set to exactly
    zero so that perfectly correlated pairs give an exact zero-risk mode.
    """
    rho = validate_correlation(rho)
    n = rho.shape[0]
    values, vectors = np.linalg.eigh(rho)
    # stable on ties, so degenerate spectra keep the solver's basis order
    order = np.argsort(-values, kind="stable")
    values = values[order]
    vectors = _fix_signs(vectors[:, order])
    values = np.where(np.abs(values) <= 1e-12 * n, 0.0, values)
    return EigenStructure(vectors=vectors, values=np.maximum(values, 0.0))


def default_floor(eigen: EigenStructure, relative: float = DEFAULT_RELATIVE_FLOOR) -> float:
    return relative * float(eigen.values[0])


def clean_eigenvalues(eigen: EigenStructure, floor: float) -> EigenStructure:
    """Clip eigenvalues below ``floor`` and rescale so they sum to N.

    The clipped spectrum is multiplied by ``N / sum``. When that factor is
    below one the clipped modes would fall back under the floor, so in that
    case the clipped modes are pinned at ``floor`` and only the others are
    rescaled. Either way the result has trace N and no value below ``floor``.
    """
    if floor < 0:
        raise InputError(f"eigenvalue floor must be >= 0, got {floor}")
    vals = eigen.values
    n = vals.shape[0]
    low = vals < floor
    if floor == 0 or not low.any():
        return eigen
    clipped = np.maximum(vals, floor)
    scale = n / clipped.sum()
    if scale >= 1.0:
        new = clipped * scale
    else:
        pinned = low.copy()
        while True:
            free_sum = vals[~pinned].sum()
            s = (n - pinned.sum() * floor) / free_sum
            grown = pinned | (vals * s < floor)
            if (grown == pinned).all():
                break
            pinned = grown
        if s <= 0:
            raise NumericalError("eigenvalue floor too high to preserve the trace")
        new = np.where(pinned, floor, vals * s)
        low = pinned
    return EigenStructure(vectors=eigen.vectors, values=new, clipped=low | eigen.clipped)


def sqrt_correlation(eigen: EigenStructure) -> np.ndarray:
    """Square root ``O diag(sqrt(Lambda))`` of the correlation matrix."""
    vals = eigen.values
    if vals.min() < -PSD_TOL * eigen.n:
        raise NumericalError(f"negative eigenvalue {vals.min():.3e} has no real square root")
    return eigen.vectors * np.sqrt(np.maximum(vals, 0.0))


@dataclass(frozen=True)
class EigenPortfolios:
    """Weights of the unit-risk eigen-portfolios, one column per mode."""

    weights: np.ndarray
    modes: np.ndarray

    def __getitem__(self, a: int) -> np.ndarray:
        return self.weights[:, a]


def eigen_portfolios(eigen: EigenStructure, modes=None) -> EigenPortfolios:
    """Columns of ``rho**(-1/2)`` for the retained modes (all by default)."""
    modes = np.arange(eigen.n) if modes is None else np.asarray(modes, dtype=int)
    lam = eigen.values[modes]
    if np.any(lam <= 0):
        bad = modes[lam <= 0].tolist()
        raise NumericalError(f"eigen-portfolios need positive eigenvalues; modes {bad} are not")
    return EigenPortfolios(weights=eigen.vectors[:, modes] / np.sqrt(lam), modes=modes)
