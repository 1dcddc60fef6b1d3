"""Finite-horizon diagnostics of tracked eigenbranches in the limit t -> oo.

limsup/liminf statements cannot be read off finite data; each is turned into
a tail statistic over the valid window ``[t_floor, t_hi]`` where ``t_hi`` is
the smaller of the last tracked t and the grid's validity horizon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import Polynomial

from .branchtrack import BranchSet
from .eigensolve import eigendecompose
from .operators import CircleGrid, FieldError, OperatorFamily, ScalarFunctionSamples, validity_horizon

T_FLOOR = 1.0
MONO_RTOL = 1e-8
LAPLACIAN_FLOOR = 1e-10  # roundoff allowance on the Laplacian lower bound
GROWTH_EXPONENT = 0.25
GROWTH_FLOOR = 1e-3


class InsufficientSamplesError(ValueError):
    pass


@dataclass(frozen=True)
class DiagnosticsConfig:
    tail_fraction: float = 0.2
    radii: tuple[float, ...] = (0.25, 0.5, 1.0)
    radius: float = 0.5
    tn_count: int = 6
    sobolev_orders: tuple[int, ...] = (1, 2)
    t_floor: float = T_FLOOR
    mono_fraction: float = 0.8


@dataclass
class Branch:
    """One branch of a :class:`BranchSet` (or synthetic data)."""

    t: np.ndarray
    values: np.ndarray
    vectors: np.ndarray | None = None  # (nodes, dim)
    slopes: np.ndarray | None = None
    quality: np.ndarray | None = None
    cluster_tracked: np.ndarray | None = None
    index: int = 0

    @classmethod
    def from_set(cls, branches: BranchSet, j: int) -> "Branch":
        return cls(branches.t, branches.values[:, j], branches.vectors[:, :, j],
                   branches.slopes[:, j], branches.quality[:, j],
                   branches.cluster_tracked[:, j], j)

    def node(self, t: float) -> int:
        return int(np.argmin(np.abs(self.t - t)))


@dataclass
class Series:
    t: np.ndarray
    values: np.ndarray

    def __len__(self):
        return len(self.t)

    def between(self, lo: float, hi: float) -> "Series":
        keep = (self.t >= lo) & (self.t <= hi)
        return Series(self.t[keep], self.values[keep])

    def to_pairs(self) -> list[list[float]]:
        return [[float(a), float(b)] for a, b in zip(self.t, self.values)]


@dataclass
class RegionMask:
    mask: np.ndarray
    centers: np.ndarray
    radius: float
    grid: CircleGrid

    @property
    def empty(self) -> bool:
        return not self.mask.any()


@dataclass
class CriticalPoint:
    x: float
    value: float


def _inner(family, u: np.ndarray, w: np.ndarray) -> float:
    return float(family.weight * (u @ w))


def _norm(family, u: np.ndarray) -> float:
    return math.sqrt(family.weight * float(u @ u))


def window(branch: Branch, family, t_floor: float = T_FLOOR) -> tuple[float, float]:
    """Valid window ``(t_floor, t_hi)`` for a branch tracked on ``family``."""
    t_hi = float(branch.t[-1])
    if isinstance(family, OperatorFamily):
        t_hi = min(t_hi, validity_horizon(family.grid))
    return t_floor, t_hi


# ---- energy series -------------------------------------------------------

def scaled_energy_series(branch: Branch, t_floor: float = T_FLOOR) -> Series:
    keep = branch.t >= t_floor
    t = branch.t[keep]
    return Series(t, branch.values[keep] / t**2)


def estimate_mu_omega(branch: Branch, tail_fraction: float = 0.2, t_hi: float | None = None):
    """Least-squares fit lambda(t) ~ mu t^2 + omega t + c on the tail window.

    Returns ``(mu, omega, c, fit_residual)``; the residual is the rms misfit
    divided by ``1 + |mu| t_max^2``.
    """
    t, lam = branch.t, branch.values
    if t_hi is None:
        t_hi = float(t[-1])
    t_lo = t_hi - tail_fraction * (t_hi - float(t[0]))
    keep = (t >= t_lo) & (t <= t_hi)
    if keep.sum() < 5:
        raise InsufficientSamplesError(
            f"need at least 5 samples in the tail window [{t_lo:.4g}, {t_hi:.4g}], got {keep.sum()}"
        )
    tt, ll = t[keep], lam[keep]
    coef = Polynomial.fit(tt, ll, 2).convert().coef  # trailing zeros get trimmed
    c, omega, mu = np.pad(coef, (0, 3 - len(coef)))
    misfit = ll - (mu * tt**2 + omega * tt + c)
    rms = float(np.sqrt(np.mean(misfit**2)))
    return float(mu), float(omega), float(c), rms / (1 + abs(mu) * float(tt[-1]) ** 2)


# ---- monotonicity ----------------------------------------------------------

def sup_norm_a(family) -> float:
    if isinstance(family, OperatorFamily):
        return family.field_a.spectral_norm_sup()
    lin = np.asarray(family.linear)
    return float(np.max(np.abs(np.linalg.eigvalsh(lin)))) if lin.size else 0.0


def laplacian_lower_bound(family) -> float:
    if isinstance(family, OperatorFamily):
        return float(family.laplacian_eigh[0][0])
    return float(np.linalg.eigvalsh(family.base)[0])


def monotone_violations(t: np.ndarray, g: np.ndarray, rtol: float = MONO_RTOL) -> list[tuple[float, float]]:
    """Every increase of g between consecutive samples beyond ``rtol (1+|g|)``."""
    inc = np.diff(g)
    bad = np.flatnonzero(inc > rtol * (1 + np.abs(g[1:])))
    return [(float(t[i + 1]), float(inc[i])) for i in bad]


@dataclass
class MonotonicityResult:
    c_used: float
    lambda_min: float
    violations: list[tuple[float, float]]
    asserted_from: float

    @property
    def asserted_violations(self) -> list[tuple[float, float]]:
        return [v for v in self.violations if v[0] >= self.asserted_from]


def monotonicity_check(branch: Branch, family, t_floor: float = T_FLOOR,
                       t_hi: float | None = None, fraction: float = 0.8) -> MonotonicityResult:
    """Audit t^-2 lambda + C/t for increases.

    C = sup_x |A(x)|_2 bounds the A-term of d/dt(t^-2 lambda) once the
    Laplacian is nonnegative; a negative lower bound enlarges C.
    """
    lam_min = laplacian_lower_bound(family)
    c = sup_norm_a(family)
    if lam_min < -LAPLACIAN_FLOOR:
        c += 2 * abs(lam_min) / t_floor
    if t_hi is None:
        t_hi = float(branch.t[-1])
    keep = (branch.t >= t_floor) & (branch.t <= t_hi)
    t = branch.t[keep]
    g = branch.values[keep] / t**2 + c / t
    asserted_from = t_hi - fraction * (t_hi - t_floor)
    return MonotonicityResult(c, lam_min, monotone_violations(t, g), asserted_from)


# ---- Laplace energy and t_n --------------------------------------------------

def laplace_energy(branch: Branch, family) -> np.ndarray:
    """<Delta psi_t, psi_t> at every node."""
    lv = branch.vectors @ family.laplacian.T if isinstance(family, OperatorFamily) \
        else branch.vectors @ family.base.T
    return family.weight * np.einsum("nd,nd->n", branch.vectors, lv)


def laplace_energy_series(branch: Branch, family, t_floor: float = T_FLOOR) -> Series:
    keep = branch.t >= t_floor
    energy = laplace_energy(branch, family)[keep]
    t = branch.t[keep]
    return Series(t, energy / t**2)


def select_tn(series: Series, count: int) -> np.ndarray:
    """A finite surrogate of a sequence t_n realizing liminf of the series.

    The upper half of the t-range (geometric midpoint, since the decay laws
    are powers of t) is cut into ``count`` logarithmic bins; each bin
    contributes its argmin, ties going to the largest t.
    """
    if len(series) == 0:
        raise InsufficientSamplesError("empty series")
    t, v = series.t, series.values
    t_first, t_last = float(t[0]), float(t[-1])
    t_mid = math.sqrt(t_first * t_last) if t_first > 0 else 0.5 * (t_first + t_last)
    eligible = np.flatnonzero(t >= t_mid * (1 - 1e-12))
    if count > len(eligible):
        raise InsufficientSamplesError(
            f"asked for {count} t_n but only {len(eligible)} samples lie in the upper half"
        )
    lo = float(t[eligible[0]])
    edges = np.geomspace(lo, t_last, count + 1) if lo > 0 else np.linspace(lo, t_last, count + 1)
    chosen: list[int] = []
    for b in range(count):
        last = b == count - 1
        members = [i for i in eligible
                   if t[i] >= edges[b] and (t[i] <= edges[b + 1] if last else t[i] < edges[b + 1])]
        if members:
            chosen.append(_argmin_latest(members, v))
    rest = [i for i in eligible if i not in chosen]
    while len(chosen) < count:
        pick = _argmin_latest(rest, v)
        chosen.append(pick)
        rest.remove(pick)
    return np.sort(t[chosen])


def _argmin_latest(indices, values) -> int:
    best = min(values[i] for i in indices)
    return max(i for i in indices if values[i] == best)


# ---- Sobolev norms -------------------------------------------------------

def sobolev_norm(family: OperatorFamily, psi: np.ndarray, s: int) -> float:
    """<(1 + Delta_h)^s psi, psi>^(1/2) by spectral calculus of the Laplacian."""
    if s < 1:
        raise ValueError("Sobolev order must be a positive integer")
    evals, evecs = family.laplacian_eigh
    coeff = evecs.T @ psi.reshape(family.grid.n_points, family.rank)
    return math.sqrt(family.weight * float(np.sum((1 + evals)[:, None] ** s * coeff**2)))


def sobolev_decay_series(branch: Branch, family: OperatorFamily, s: int, tn: np.ndarray) -> tuple[Series, bool]:
    nodes = [branch.node(t) for t in tn]
    t = branch.t[nodes]
    vals = np.array([sobolev_norm(family, branch.vectors[i], s) for i in nodes]) / t**s
    decaying = bool(len(vals) >= 2 and vals[-1] < 0.5 * vals[0])
    return Series(t, vals), decaying


# ---- localization ----------------------------------------------------------

def potential_residual(family: OperatorFamily, psi: np.ndarray, mu: float) -> float:
    """|(V - mu) psi|."""
    return _norm(family, family.field_v.apply(psi) - mu * psi)


def potential_residual_series(branch: Branch, family: OperatorFamily, mu: float, tn=None) -> Series:
    nodes = range(len(branch.t)) if tn is None else [branch.node(t) for t in tn]
    nodes = list(nodes)
    return Series(branch.t[nodes],
                  np.array([potential_residual(family, branch.vectors[i], mu) for i in nodes]))


def _arc_mask(grid: CircleGrid, centers: np.ndarray, r: float) -> np.ndarray:
    mask = np.zeros(grid.n_points, bool)
    for x0 in centers:
        mask |= grid.arc_distance(x0) <= r + 1e-12
    return mask


def sigma_mu_mask(family: OperatorFamily, mu: float, r: float = 0.5, mu_band: float = 0.0) -> RegionMask:
    """Radius-r neighbourhood of the degeneracy locus det(V(x) - mu) = 0.

    Points qualify where |det(V - mu)| has a local minimum that is small, or
    where det changes sign between neighbours.  ``mu_band`` widens "small" to
    cover an uncertainty in mu: the per-point determinant is evaluated with
    every eigenvalue of V(x) within the band of mu counted as zero.
    """
    grid = family.grid
    m = family.rank
    vals = family.field_v.values
    det = np.linalg.det(vals - mu * np.eye(m)[None])
    nu = np.linalg.eigvalsh(vals)
    banded = np.prod(np.maximum(np.abs(nu - mu) - mu_band, 0.0), axis=1)
    tol = 1e-6 * (1 + abs(mu)) ** m
    a = np.abs(det)
    local_min = (a <= np.roll(a, 1)) & (a <= np.roll(a, -1))
    hit = local_min & (banded <= tol)
    nxt = np.roll(det, -1)
    sign_change = np.flatnonzero(det * nxt < 0)
    for j in sign_change:
        j2 = (j + 1) % grid.n_points
        hit[j if a[j] <= a[j2] else j2] = True
    centers = grid.points[hit]
    return RegionMask(_arc_mask(grid, centers, r), centers, r, grid)


def mass_outside(psi: np.ndarray, mask: RegionMask) -> float:
    """L2 norm of psi on the complement of the mask."""
    grid = mask.grid
    per_point = psi.reshape(grid.n_points, -1)
    return math.sqrt(grid.spacing * float(np.sum(per_point[~mask.mask] ** 2)))


def gradient_localization_series(branch: Branch, family: OperatorFamily, tn=None) -> Series:
    """|(v')^2 psi| for a scalar potential v."""
    if not family.is_scalar_potential:
        raise FieldError("gradient localization needs a scalar potential (V = v id)")
    v = family.potential_samples()
    dv2 = np.repeat(v.d1**2, family.rank)
    nodes = list(range(len(branch.t))) if tn is None else [branch.node(t) for t in tn]
    return Series(branch.t[nodes],
                  np.array([_norm(family, dv2 * branch.vectors[i]) for i in nodes]))


def critical_values(samples: ScalarFunctionSamples, grid: CircleGrid, tiny: float = 1e-10) -> list[CriticalPoint]:
    """Critical points of a sampled periodic function.

    Grid points with |v'| < tiny, and sign changes of v' refined by one secant
    step.  Runs of consecutive flat points are reported once.
    """
    x, h, n = grid.points, grid.spacing, grid.n_points
    d1 = samples.d1
    flat = np.abs(d1) < tiny
    if flat.all():
        return [CriticalPoint(float(x[0]), float(samples.values[0]))]
    out = []
    start = int(np.flatnonzero(~flat)[0])
    for step in range(n):
        j = (start + step) % n
        j2 = (j + 1) % n
        if flat[j]:
            if not flat[(j - 1) % n]:
                out.append(CriticalPoint(float(x[j]), float(samples.values[j])))
            continue
        if not flat[j2] and d1[j] * d1[j2] < 0:
            s = -d1[j] * h / (d1[j2] - d1[j])
            value = samples.values[j] + d1[j] * s + 0.5 * samples.d2[j] * s * s
            out.append(CriticalPoint(float((x[j] + s) % (2 * np.pi)), float(value)))
    return sorted(out, key=lambda c: c.x)


def critical_set_mask(grid: CircleGrid, points: list[CriticalPoint], r: float) -> RegionMask:
    centers = np.array([c.x for c in points])
    return RegionMask(_arc_mask(grid, centers, r), centers, r, grid)


# ---- interpretations of mu and the equivalent statements ---------------------

def _extrapolated_limit(series: Series) -> float:
    """Constant term of a least-squares fit a + b/t."""
    if len(series) < 2:
        return float(series.values[-1]) if len(series) else float("nan")
    design = np.column_stack([np.ones(len(series)), 1 / series.t])
    coef, *_ = np.linalg.lstsq(design, series.values, rcond=None)
    return float(coef[0])


@dataclass
class TailStat:
    series: Series
    tail_max: float
    tail_min: float
    limit: float

    def to_dict(self):
        return {"tail_max": self.tail_max, "tail_min": self.tail_min, "extrapolated": self.limit}


def tail_stat(series: Series, half_from: float, tail_from: float, t_hi: float) -> TailStat:
    upper = series.between(half_from, t_hi)
    tail = series.between(tail_from, t_hi)
    return TailStat(series, float(np.max(upper.values)), float(np.min(upper.values)),
                    _extrapolated_limit(tail))


def interpretations(branch: Branch, family, t_floor: float, t_hi: float, tail_fraction: float) -> dict[str, TailStat]:
    keep = (branch.t >= t_floor) & (branch.t <= t_hi)
    t = branch.t[keep]
    vecs = branch.vectors[keep]
    vpsi = np.array([family.field_v.apply(p) for p in vecs]) if isinstance(family, OperatorFamily) \
        else vecs @ family.quadratic.T
    v_expect = family.weight * np.einsum("nd,nd->n", vecs, vpsi)
    slope = branch.slopes[keep]
    lam = branch.values[keep]
    half_from = t_hi - 0.5 * (t_hi - t_floor)
    tail_from = t_hi - tail_fraction * (t_hi - t_floor)
    series = {
        "potential_expectation": Series(t, v_expect),
        "half_slope_over_t": Series(t, slope / (2 * t)),
        "d_dt_lambda_over_t": Series(t, slope / t - lam / t**2),
    }
    return {name: tail_stat(s, half_from, tail_from, t_hi) for name, s in series.items()}


def growth_exponent(series: Series) -> float:
    nz = np.abs(series.values) > 0
    if nz.sum() < 3:
        return 0.0
    return float(np.polyfit(np.log(series.t[nz]), np.log(np.abs(series.values[nz])), 1)[0])


def is_unbounded(series: Series) -> bool:
    if len(series) < 3 or np.max(np.abs(series.values)) <= GROWTH_FLOOR:
        return False
    return growth_exponent(series) > GROWTH_EXPONENT


def equivalence_ratios(branch: Branch, family, mu: float, t_floor: float = T_FLOOR,
                       t_hi: float | None = None) -> dict[str, dict]:
    """Series whose boundedness expresses each of the equivalent hypotheses,
    plus the consequence t (t^-2 lambda - mu).  Reported, never asserted."""
    if t_hi is None:
        t_hi = float(branch.t[-1])
    keep = (branch.t >= t_floor) & (branch.t <= t_hi)
    t, lam = branch.t[keep], branch.values[keep]
    series = {}
    if branch.vectors is not None:
        energy = laplace_energy(branch, family)[keep]
        vecs = branch.vectors[keep]
        vpsi = np.array([family.field_v.apply(p) for p in vecs]) if isinstance(family, OperatorFamily) \
            else vecs @ family.quadratic.T
        v_expect = family.weight * np.einsum("nd,nd->n", vecs, vpsi)
        series["laplace_energy_over_t"] = Series(t, energy / t)
        series["t_potential_excess"] = Series(t, t * (v_expect - mu))
    scaled = lam / t**2
    tm = 0.5 * (t[1:] + t[:-1])
    series["t2_d_scaled_energy"] = Series(tm, tm**2 * np.diff(scaled) / np.diff(t))
    if branch.slopes is not None:
        series["slope_minus_2t_mu"] = Series(t, branch.slopes[keep] - 2 * t * mu)
    series["t_scaled_energy_excess"] = Series(t, t * (scaled - mu))
    half_from = t_hi - 0.5 * (t_hi - t_floor)
    out = {}
    for name, s in series.items():
        tail = s.between(half_from, t_hi)
        out[name] = {
            "tail_max_abs": float(np.max(np.abs(tail.values))) if len(tail) else float("nan"),
            "growth_exponent": growth_exponent(tail),
            "bounded": not is_unbounded(tail),
        }
    return out


# ---- further checks ----------------------------------------------------------

def growth_bound(branch: Branch, t_hi: float) -> float:
    """max |lambda| / (1 + t^2) over the tracked range up to t_hi."""
    keep = branch.t <= t_hi
    return float(np.max(np.abs(branch.values[keep]) / (1 + branch.t[keep] ** 2)))


def conjecture_gap(family: OperatorFamily, mu: float) -> float:
    """mu minus the absolute minimum of (the lowest eigenvalue of) V."""
    return float(mu - np.min(np.linalg.eigvalsh(family.field_v.values)[:, 0]))


def supersymmetry_gap(family0: OperatorFamily, family1: OperatorFamily, t: float, count: int = 5) -> tuple[float, float]:
    """Largest mismatch between the nonzero low spectra of the degree-0 and
    degree-1 Witten families at t, and the discretization tolerance."""
    k = count + 1
    s0 = eigendecompose(family0.assemble(t), k, t, family0.weight).eigenvalues
    s1 = eigendecompose(family1.assemble(t), k, t, family1.weight).eigenvalues
    s0 = np.delete(s0, np.argmin(np.abs(s0)))
    s1 = np.delete(s1, np.argmin(np.abs(s1)))
    h = family0.grid.spacing
    fprime2 = float(np.max(family0.field_v.values))  # V = (f')^2
    tol = 50 * h**2 * (1 + t**2) * max(1.0, fprime2)
    return float(np.max(np.abs(s0 - s1))), tol


# ---- per-branch report -----------------------------------------------------

@dataclass
class BranchReport:
    branch: int
    data: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)


def diagnose_branch(branches: BranchSet, j: int, family: OperatorFamily,
                    config: DiagnosticsConfig = DiagnosticsConfig()) -> BranchReport:
    br = Branch.from_set(branches, j)
    t_floor, t_hi = window(br, family, config.t_floor)
    mu, omega, c, fit_res = estimate_mu_omega(br, config.tail_fraction, t_hi)

    mono = monotonicity_check(br, family, t_floor, t_hi, config.mono_fraction)
    lap = laplace_energy_series(br, family, t_floor).between(t_floor, t_hi)
    tn = select_tn(lap, config.tn_count)
    interp = interpretations(br, family, t_floor, t_hi, config.tail_fraction)

    scalar = family.is_scalar_potential
    mu_tol = max(1e-2, 5 * fit_res)
    crit = critical_values(family.potential_samples(), family.grid) if scalar else []
    crit_gap = min(abs(mu - cp.value) for cp in crit) if crit else None

    localization = {}
    for r in config.radii:
        sig = sigma_mu_mask(family, mu, r, mu_band=mu_tol)
        entry = {
            "sigma_mu_centers": [float(x) for x in sig.centers],
            "mass_outside_sigma_mu": [mass_outside(br.vectors[br.node(t)], sig) if not sig.empty
                                      else None for t in tn],
        }
        if scalar:
            cm = critical_set_mask(family.grid, crit, r)
            entry["mass_outside_critical_set"] = [mass_outside(br.vectors[br.node(t)], cm) for t in tn]
        localization[_radius_key(r)] = entry

    residual = potential_residual_series(br, family, mu, tn)
    sensitivity = {
        "minus": potential_residual_series(br, family, mu - fit_res, tn).values.tolist(),
        "plus": potential_residual_series(br, family, mu + fit_res, tn).values.tolist(),
    }
    gradient = gradient_localization_series(br, family, tn).values.tolist() if scalar else None

    sobolev = {}
    for s in config.sobolev_orders:
        ser, decaying = sobolev_decay_series(br, family, s, tn)
        sobolev[str(s)] = {"values": ser.values.tolist(), "decaying": decaying}

    equiv = equivalence_ratios(br, family, mu, t_floor, t_hi)
    cgap = conjecture_gap(family, mu)
    lap_min = float(np.min(laplace_energy(br, family)))

    interp_tol = 10 * fit_res + 0.05
    checks = {
        "monotonicity": not mono.asserted_violations,
        "mu_interpretations": all(
            abs(interp[name].limit - mu) <= interp_tol
            for name in ("potential_expectation", "half_slope_over_t")
        ),
        "laplace_energy_nonnegative": lap_min >= -1e-10,
    }
    if crit_gap is not None:
        checks["critical_value_gap"] = crit_gap <= mu_tol

    data = {
        "branch": j,
        "mu": mu,
        "omega": omega,
        "constant": c,
        "fit_residual": fit_res,
        "validity_horizon": validity_horizon(family.grid),
        "window": [t_floor, t_hi],
        "growth_bound": growth_bound(br, t_hi),
        "monotonicity": {
            "C_used": mono.c_used,
            "laplacian_lower_bound": mono.lambda_min,
            "asserted_from": mono.asserted_from,
            "violations": [list(v) for v in mono.violations],
            "asserted_violations": len(mono.asserted_violations),
        },
        "interpretations": {k: v.to_dict() for k, v in interp.items()},
        "laplace_energy_min": lap_min,
        "tn_sequence": tn.tolist(),
        "potential_residual": residual.values.tolist(),
        "potential_residual_sensitivity": sensitivity,
        "gradient_localization": gradient,
        "localization": localization,
        "sobolev": sobolev,
        "critical_values": [[cp.x, cp.value] for cp in crit],
        "critical_value_gap": crit_gap,
        "conjecture_gap": cgap,
        "equivalence_ratios": equiv,
        "cluster_tracked_nodes": int(br.cluster_tracked.sum()),
        "exchanged_nodes": int(branches.exchanged[:, j].sum()) if branches.exchanged is not None else 0,
        "min_step_quality": float(br.quality.min()),
    }
    return BranchReport(j, data, checks)


def _radius_key(r: float) -> str:
    return f"{r:g}"
