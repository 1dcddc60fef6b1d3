"""Lowest eigenpairs of assembled symmetric matrices, with certified residuals."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

SYMMETRY_TOL = 1e-10
GRAM_TOL = 1e-10
RESIDUAL_TOL = 1e-8


class SolverError(RuntimeError):
    def __init__(self, message: str, worst_residual: float = float("nan")):
        super().__init__(f"{message} (worst residual {worst_residual:.3g})")
        self.worst_residual = worst_residual


@dataclass
class SpectrumSnapshot:
    """Eigenpairs at one parameter value.

    ``eigenvectors`` holds one vector per column, orthonormal in the weighted
    product ``<u, w> = weight * u.w``.
    """

    t: float
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    residuals: np.ndarray
    weight: float = 1.0

    @property
    def k(self) -> int:
        return len(self.eigenvalues)

    @property
    def dimension(self) -> int:
        return self.eigenvectors.shape[0]


@dataclass
class ResidualReport:
    residuals: np.ndarray
    rayleigh_defects: np.ndarray
    gram_defect: float
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def residual_norms(matrix, values, vectors, weight=1.0) -> np.ndarray:
    r = matrix @ vectors - vectors * values[None, :]
    return np.sqrt(weight * np.sum(r * r, axis=0))


def eigendecompose(matrix: np.ndarray, k: int, t_tag: float = 0.0, weight: float = 1.0) -> SpectrumSnapshot:
    """The k lowest eigenpairs of a symmetric matrix.

    Dense LAPACK path (tridiagonal reduction followed by an MRRR/implicit-shift
    solve); no random starts, so identical input gives identical output.
    """
    matrix = np.asarray(matrix, dtype=float)
    n = matrix.shape[0]
    if matrix.ndim != 2 or matrix.shape[1] != n:
        raise ValueError(f"expected a square matrix, got shape {matrix.shape}")
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    scale = max(1.0, float(np.max(np.abs(matrix))))
    asym = float(np.max(np.abs(matrix - matrix.T)))
    if asym > SYMMETRY_TOL * scale:
        raise ValueError(f"matrix is not symmetric (defect {asym:.3g})")
    try:
        values, vectors = scipy.linalg.eigh(matrix, subset_by_index=(0, k - 1), check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SolverError(f"eigensolver failed at t={t_tag}: {exc}") from exc
    vectors = vectors / np.sqrt(weight)
    residuals = residual_norms(matrix, values, vectors, weight)
    bound = RESIDUAL_TOL * (1 + np.abs(values))
    if np.any(residuals > bound):
        worst = float(np.max(residuals / (1 + np.abs(values))))
        raise SolverError(f"eigenpairs at t={t_tag} not converged", worst)
    return SpectrumSnapshot(float(t_tag), values, vectors, residuals, weight)


def verify_snapshot(snapshot: SpectrumSnapshot, matrix: np.ndarray) -> ResidualReport:
    """Recompute residuals, Rayleigh quotients and Gram defect of a snapshot."""
    matrix = np.asarray(matrix, dtype=float)
    if matrix.shape != (snapshot.dimension, snapshot.dimension):
        raise ValueError(
            f"matrix shape {matrix.shape} does not match snapshot dimension {snapshot.dimension}"
        )
    w = snapshot.weight
    vals, vecs = snapshot.eigenvalues, snapshot.eigenvectors
    residuals = residual_norms(matrix, vals, vecs, w)
    rayleigh = w * np.einsum("ik,ik->k", vecs, matrix @ vecs)
    gram = w * vecs.T @ vecs
    gram_defect = float(np.max(np.abs(gram - np.eye(len(vals))))) if len(vals) else 0.0

    violations = []
    if np.any(np.diff(vals) < 0):
        violations.append("eigenvalues not ascending")
    if gram_defect > GRAM_TOL:
        violations.append(f"Gram defect {gram_defect:.3g} exceeds {GRAM_TOL:g}")
    bound = RESIDUAL_TOL * (1 + np.abs(vals))
    bad = np.flatnonzero(residuals > bound)
    if bad.size:
        violations.append(f"residual above tolerance for pairs {bad.tolist()}")
    bad = np.flatnonzero(np.abs(rayleigh - vals) > bound)
    if bad.size:
        violations.append(f"Rayleigh quotient mismatch for pairs {bad.tolist()}")
    return ResidualReport(residuals, rayleigh - vals, gram_defect, violations)
