"""Discretized operator families Delta_t = Delta + t A + t^2 V on the circle.

Sections of a rank-m real bundle are stored point-major: the coefficient of
bundle coordinate ``c`` at grid point ``j`` sits at index ``j*m + c``.  The
discrete L2 product carries the grid spacing as weight,
``<u, w> = h * sum_j u_j . w_j``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

from .functions import PeriodicFunction

log = logging.getLogger(__name__)

MIN_POINTS = 8
SYMMETRY_TOL = 1e-8
POINTS_PER_WELL = 8


class GridSizeError(ValueError):
    pass


class FieldError(ValueError):
    pass


@dataclass(frozen=True)
class CircleGrid:
    n_points: int

    def __post_init__(self):
        if int(self.n_points) != self.n_points or self.n_points < MIN_POINTS:
            raise GridSizeError(
                f"circle grid needs at least {MIN_POINTS} points, got {self.n_points}"
            )

    @property
    def spacing(self) -> float:
        return 2 * np.pi / self.n_points

    @cached_property
    def points(self) -> np.ndarray:
        return np.arange(self.n_points) * self.spacing

    def arc_distance(self, x0: float) -> np.ndarray:
        """Distance along the circle from every grid point to ``x0``."""
        d = np.abs(self.points - x0) % (2 * np.pi)
        return np.minimum(d, 2 * np.pi - d)


def build_circle_grid(n: int) -> CircleGrid:
    return CircleGrid(n)


def validity_horizon(grid: CircleGrid, points_per_well: int = POINTS_PER_WELL) -> float:
    """Largest t whose O(t^-1/2)-wide wells are still resolved by the grid."""
    return float((points_per_well * grid.spacing) ** -2)


@dataclass(frozen=True)
class ScalarFunctionSamples:
    values: np.ndarray
    d1: np.ndarray
    d2: np.ndarray

    @classmethod
    def from_function(cls, grid: CircleGrid, fn: PeriodicFunction) -> "ScalarFunctionSamples":
        v, d1, d2 = fn(grid.points)
        return cls(np.asarray(v, float), np.asarray(d1, float), np.asarray(d2, float))

    @classmethod
    def from_values(cls, grid: CircleGrid, values) -> "ScalarFunctionSamples":
        """Tabulated samples; derivatives by periodic centered differences."""
        v = np.asarray(values, dtype=float)
        if v.shape != (grid.n_points,):
            raise FieldError(f"expected {grid.n_points} samples, got shape {v.shape}")
        return cls(v, centered_difference(v, grid.spacing), second_difference(v, grid.spacing))

    def __len__(self):
        return len(self.values)


def centered_difference(v: np.ndarray, h: float) -> np.ndarray:
    return (np.roll(v, -1) - np.roll(v, 1)) / (2 * h)


def second_difference(v: np.ndarray, h: float) -> np.ndarray:
    return (np.roll(v, -1) - 2 * v + np.roll(v, 1)) / h**2


@dataclass(frozen=True)
class MatrixField:
    """Per-point symmetric m x m matrices, shape ``(n_points, m, m)``."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 3 or vals.shape[1] != vals.shape[2]:
            raise FieldError(f"matrix field must have shape (n, m, m), got {vals.shape}")
        asym = np.max(np.abs(vals - vals.transpose(0, 2, 1))) if vals.size else 0.0
        if asym > 1e-12:
            raise FieldError(f"matrix field is not symmetric (defect {asym:.3g})")
        object.__setattr__(self, "values", vals)

    @property
    def rank(self) -> int:
        return self.values.shape[1]

    @property
    def n_points(self) -> int:
        return self.values.shape[0]

    @classmethod
    def scalar(cls, values, rank: int = 1) -> "MatrixField":
        """The field v(x) * identity."""
        v = np.asarray(values, dtype=float)
        return cls(v[:, None, None] * np.eye(rank)[None, :, :])

    @classmethod
    def zeros(cls, n_points: int, rank: int = 1) -> "MatrixField":
        return cls(np.zeros((n_points, rank, rank)))

    def block_diagonal(self) -> np.ndarray:
        n, m, _ = self.values.shape
        out = np.zeros((n * m, n * m))
        for c in range(m):
            for d in range(m):
                out[np.arange(n) * m + c, np.arange(n) * m + d] = self.values[:, c, d]
        return out

    def apply(self, psi: np.ndarray) -> np.ndarray:
        """Pointwise action on a section (or on the columns of a stack of them)."""
        n, m, _ = self.values.shape
        if psi.ndim == 1:
            return np.einsum("jcd,jd->jc", self.values, psi.reshape(n, m)).reshape(-1)
        cols = psi.reshape(n, m, -1)
        return np.einsum("jcd,jdk->jck", self.values, cols).reshape(n * m, -1)

    def is_scalar(self, tol: float = 1e-12) -> bool:
        m = self.rank
        diag = self.values[:, 0, 0]
        return bool(np.all(np.abs(self.values - diag[:, None, None] * np.eye(m)) <= tol))

    def spectral_norm_sup(self) -> float:
        if not self.values.size:
            return 0.0
        return float(np.max(np.abs(np.linalg.eigvalsh(self.values))))


def sample_matrix_field(
    grid: CircleGrid, generator: Callable[[float], np.ndarray], rank: int | None = None
) -> MatrixField:
    """Sample ``generator(x)`` at every grid point, enforcing symmetry."""
    samples = []
    for x in grid.points:
        b = np.atleast_2d(np.asarray(generator(float(x)), dtype=float))
        if b.shape[0] != b.shape[1]:
            raise FieldError(f"generator returned non-square {b.shape} at x={x:.6g}")
        if rank is not None and b.shape[0] != rank:
            raise FieldError(f"generator returned rank {b.shape[0]}, expected {rank}")
        asym = np.max(np.abs(b - b.T))
        if asym > SYMMETRY_TOL:
            raise FieldError(f"generator output not symmetric at x={x:.6g} (defect {asym:.3g})")
        samples.append((b + b.T) / 2)
    return MatrixField(np.array(samples))


def rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def rotated_diagonal_field(
    grid: CircleGrid, eigen_fns: list[PeriodicFunction], rate: float = 1.0
) -> MatrixField:
    """R(rate x) diag(f_1(x), f_2(x)) R(rate x)^T on the circle."""
    if len(eigen_fns) != 2:
        raise FieldError("rotated diagonal fields are rank 2")
    if abs(2 * rate - round(2 * rate)) > 1e-12:
        raise FieldError(f"rotation rate must be a multiple of 1/2 to close up, got {rate}")

    def gen(x):
        r = rotation(rate * x)
        d = np.diag([float(f(x)[0]) for f in eigen_fns])
        return r @ d @ r.T

    return sample_matrix_field(grid, gen, rank=2)


def circulant_laplacian(n: int) -> np.ndarray:
    """The periodic (1/h^2)(-1, 2, -1) stencil on n equispaced points of the
    circle.  No minimum size, so coarse closed-form cases stay reachable."""
    h = 2 * np.pi / n
    lap = np.zeros((n, n))
    idx = np.arange(n)
    lap[idx, idx] = 2.0 / h**2
    lap[idx, (idx + 1) % n] -= 1.0 / h**2
    lap[idx, (idx - 1) % n] -= 1.0 / h**2
    return lap


def build_laplacian(grid: CircleGrid, rank: int = 1) -> np.ndarray:
    """Discrete -d^2/dx^2 acting on each of the ``rank`` bundle coordinates."""
    lap = circulant_laplacian(grid.n_points)
    if rank == 1:
        return lap
    return np.kron(lap, np.eye(rank))


@dataclass(frozen=True)
class MatrixFamily:
    """Explicit quadratic family ``base + t*linear + t^2*quadratic`` with a
    scalar inner-product weight.  Used for small closed-form test families."""

    base: np.ndarray
    linear: np.ndarray
    quadratic: np.ndarray
    weight: float = 1.0
    label: str = "matrix"

    @property
    def dimension(self) -> int:
        return self.base.shape[0]

    def assemble(self, t: float) -> np.ndarray:
        if t == 0:
            return self.base.copy()
        return self.base + t * self.linear + t * t * self.quadratic

    def assemble_derivative(self, t: float) -> np.ndarray:
        return self.linear + 2 * t * self.quadratic


@dataclass(frozen=True)
class OperatorFamily:
    grid: CircleGrid
    rank: int
    laplacian: np.ndarray
    field_a: MatrixField
    field_v: MatrixField
    label: str = ""
    scalar_v: ScalarFunctionSamples | None = field(default=None, compare=False)

    def __post_init__(self):
        n, m = self.grid.n_points, self.rank
        for name, fld in (("A", self.field_a), ("V", self.field_v)):
            if fld.n_points != n or fld.rank != m:
                raise FieldError(
                    f"field {name} has shape {fld.values.shape}, expected ({n}, {m}, {m})"
                )
        if self.laplacian.shape != (n * m, n * m):
            raise FieldError("laplacian size does not match grid and rank")

    @property
    def weight(self) -> float:
        return self.grid.spacing

    @property
    def dimension(self) -> int:
        return self.grid.n_points * self.rank

    @cached_property
    def a_block(self) -> np.ndarray:
        return self.field_a.block_diagonal()

    @cached_property
    def v_block(self) -> np.ndarray:
        return self.field_v.block_diagonal()

    def assemble(self, t: float) -> np.ndarray:
        if t == 0:
            return self.laplacian.copy()
        return self.laplacian + t * self.a_block + (t * t) * self.v_block

    def assemble_derivative(self, t: float) -> np.ndarray:
        return self.a_block + (2 * t) * self.v_block

    @cached_property
    def laplacian_eigh(self) -> tuple[np.ndarray, np.ndarray]:
        """Eigendecomposition of the scalar (rank one) discrete Laplacian."""
        lap1 = build_laplacian(self.grid, 1)
        return np.linalg.eigh(lap1)

    @property
    def is_scalar_potential(self) -> bool:
        return self.field_v.is_scalar()

    def potential_samples(self) -> ScalarFunctionSamples:
        """Scalar potential v with v' and v''; tabulated differences if not analytic."""
        if self.scalar_v is not None:
            return self.scalar_v
        if not self.is_scalar_potential:
            raise FieldError("potential is matrix valued; no scalar samples exist")
        return ScalarFunctionSamples.from_values(self.grid, self.field_v.values[:, 0, 0])

    def warn_if_beyond_horizon(self, t_max: float) -> bool:
        horizon = validity_horizon(self.grid)
        if t_max > horizon:
            log.warning(
                "%s: t_max=%.4g exceeds the validity horizon %.4g of the %d-point grid",
                self.label or "family", t_max, horizon, self.grid.n_points,
            )
            return True
        return False


def make_family(
    grid: CircleGrid,
    field_v: MatrixField,
    field_a: MatrixField | None = None,
    label: str = "",
    scalar_v: ScalarFunctionSamples | None = None,
) -> OperatorFamily:
    rank = field_v.rank
    if field_a is None:
        field_a = MatrixField.zeros(grid.n_points, rank)
    return OperatorFamily(grid, rank, build_laplacian(grid, rank), field_a, field_v, label, scalar_v)


def build_potential_family(
    grid: CircleGrid, v: PeriodicFunction, a: PeriodicFunction | None = None,
    rank: int = 1, label: str = "",
) -> OperatorFamily:
    """Scalar fields V = v id, A = a id on a rank-m bundle."""
    vs = ScalarFunctionSamples.from_function(grid, v)
    field_a = None
    if a is not None:
        field_a = MatrixField.scalar(a(grid.points)[0], rank)
    return make_family(grid, MatrixField.scalar(vs.values, rank), field_a, label, vs)


def build_witten_family(
    grid: CircleGrid, f: ScalarFunctionSamples | PeriodicFunction, degree: int, label: str = ""
) -> OperatorFamily:
    """Witten Laplacian of a function f on 0-forms (degree 0) or 1-forms (degree 1).

    In Weitzenboeck form on the circle: V = (f')^2 and A = -f'' on functions,
    A = +f'' on one-forms.
    """
    if degree not in (0, 1):
        raise ValueError(f"degree must be 0 or 1 on the circle, got {degree}")
    if isinstance(f, PeriodicFunction):
        f = ScalarFunctionSamples.from_function(grid, f)
    if len(f) != grid.n_points:
        raise FieldError("function samples do not match the grid")
    v = f.d1**2
    v_d1 = 2 * f.d1 * f.d2
    scalar_v = ScalarFunctionSamples(v, v_d1, centered_difference(v_d1, grid.spacing))
    sign = -1.0 if degree == 0 else 1.0
    return make_family(
        grid, MatrixField.scalar(v), MatrixField.scalar(sign * f.d2), label, scalar_v
    )


def assemble(family, t: float) -> np.ndarray:
    return family.assemble(t)


def assemble_derivative(family, t: float) -> np.ndarray:
    return family.assemble_derivative(t)
