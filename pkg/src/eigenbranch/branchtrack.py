"""Numerical analytic eigenbranches: consistent labels across t.

Eigenpairs are computed on a parameter grid and chained by eigenvector
overlap (optimal assignment).  A step is refined by bisection when the
assignment is ambiguous or when it makes two well-separated branches change
order, so that narrow avoided crossings are resolved and genuine crossings
are confirmed at the finest step.

Numerically degenerate eigenspaces have no preferred basis.  Inside such a
cluster the basis is fixed by diagonalizing the derivative of the family
(the first-order choice of analytic branches through a degeneracy) and, when
that does not separate them either, by rotating onto the previous step's
vectors (orthogonal Procrustes).
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .eigensolve import SpectrumSnapshot, eigendecompose, residual_norms

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.75
DEFAULT_EPS_DEG = 1e-6
# Relative gap below which eigh's basis of a cluster is arbitrary.
TIGHT_DEG = 1e-10
SLOPE_TOL = 1e-8
GUARD = 4
OVERLAP_FLOOR = 1e-300


class TrackingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TGrid:
    base: np.ndarray
    min_step: float

    def __post_init__(self):
        base = np.asarray(self.base, dtype=float)
        if base.ndim != 1 or len(base) < 2:
            raise ValueError("a t-grid needs at least two points")
        if base[0] < 0:
            raise ValueError(f"t-grid must start at t >= 0, got {base[0]}")
        if np.any(np.diff(base) <= 0):
            raise ValueError("t-grid must be strictly ascending")
        if self.min_step <= 0:
            raise ValueError("min_step must be positive")
        if np.min(np.diff(base)) < self.min_step * (1 - 1e-12):
            raise ValueError("base steps are smaller than min_step")
        object.__setattr__(self, "base", base)

    @classmethod
    def uniform(cls, t_min: float, t_max: float, steps: int, min_step: float | None = None) -> "TGrid":
        if min_step is None:
            min_step = 1e-4 * (t_max - t_min)
        return cls(np.linspace(t_min, t_max, steps + 1), min_step)


@dataclass
class OverlapReport:
    matrix: np.ndarray
    assignment: np.ndarray | None = None
    quality: np.ndarray | None = None
    min_overlap: float = float("nan")
    clusters: list[tuple[int, ...]] = field(default_factory=list)
    cluster_tracked: np.ndarray | None = None
    crossings: list[tuple[int, int]] = field(default_factory=list)
    tau: float = DEFAULT_TAU

    @property
    def ambiguous(self) -> bool:
        return bool(self.min_overlap < self.tau)


@dataclass
class Frame:
    """A snapshot whose degenerate clusters carry a definite basis."""

    t: float
    values: np.ndarray
    vectors: np.ndarray
    slopes: np.ndarray
    residuals: np.ndarray
    weight: float

    def head(self, k: int) -> "Frame":
        return Frame(self.t, self.values[:k], self.vectors[:, :k], self.slopes[:k],
                     self.residuals[:k], self.weight)

    def take(self, cols) -> "Frame":
        return Frame(self.t, self.values[cols], self.vectors[:, cols], self.slopes[cols],
                     self.residuals[cols], self.weight)

    def as_snapshot(self) -> SpectrumSnapshot:
        return SpectrumSnapshot(self.t, self.values, self.vectors, self.residuals, self.weight)


@dataclass
class BranchSet:
    """k tracked branches on the accepted nodes ``t``.

    Arrays are indexed ``[node, branch]``; ``vectors`` is ``[node, :, branch]``.
    ``quality[i, j]`` is the matching quality of the step into node ``i``
    (1 at the first node); ``cluster_tracked`` marks nodes where branch ``j``
    is only known up to its degenerate cluster, ``exchanged`` nodes where the
    slot was handed to a branch entering the k-window from above.
    """

    t: np.ndarray
    values: np.ndarray
    vectors: np.ndarray
    slopes: np.ndarray
    residuals: np.ndarray
    quality: np.ndarray
    cluster_tracked: np.ndarray
    spectrum: np.ndarray
    weight: float
    base_t: np.ndarray
    exchanged: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.values.shape[1]

    @property
    def n_nodes(self) -> int:
        return len(self.t)

    @property
    def step_min_overlap(self) -> np.ndarray:
        return self.quality.min(axis=1)

    def psi(self, node: int, branch: int) -> np.ndarray:
        return self.vectors[node, :, branch]

    def flip_signs(self, mask: np.ndarray) -> "BranchSet":
        """Copy with psi -> -psi wherever ``mask[node, branch]`` is set."""
        signs = np.where(np.asarray(mask, bool), -1.0, 1.0)
        return replace(self, vectors=self.vectors * signs[:, None, :])

    def gauge_fixed(self) -> "BranchSet":
        """Copy in a canonical gauge: at the first node the largest-magnitude
        component is positive, and consecutive overlaps are nonnegative."""
        vecs = self.vectors.copy()
        first = vecs[0]
        lead = first[np.argmax(np.abs(first), axis=0), np.arange(self.k)]
        vecs[0] *= np.where(lead < 0, -1.0, 1.0)[None, :]
        for i in range(1, self.n_nodes):
            ov = np.einsum("dk,dk->k", vecs[i - 1], vecs[i])
            vecs[i] *= np.where(ov < 0, -1.0, 1.0)[None, :]
        return replace(self, vectors=vecs)

    def check_invariants(self, value_tol: float = 1e-10) -> list[str]:
        problems = []
        for i in range(self.n_nodes):
            if np.max(np.abs(np.sort(self.values[i]) - self.spectrum[i])) > value_tol:
                problems.append(f"node {i}: branch values are not a permutation of the spectrum")
        for i in range(self.n_nodes - 1):
            ov = self.weight * np.einsum("dk,dk->k", self.vectors[i], self.vectors[i + 1])
            if np.any(ov < 0):
                problems.append(f"step {i}->{i + 1}: negative gauge overlap")
            dt = self.t[i + 1] - self.t[i]
            jump = np.abs(self.values[i + 1] - self.values[i])
            bound = (np.abs(self.slopes[i]) + np.abs(self.slopes[i + 1]) + 1) * dt
            bad = np.flatnonzero((jump > bound) & ~self.cluster_tracked[i + 1])
            if bad.size:
                problems.append(f"step {i}->{i + 1}: discontinuous branches {bad.tolist()}")
        return problems


def _weighted_gram(a: np.ndarray, b: np.ndarray, weight: float) -> np.ndarray:
    return weight * (a.T @ b)


def overlap_matrix(a: SpectrumSnapshot | Frame, b: SpectrumSnapshot | Frame) -> OverlapReport:
    """Entries |<psi_i(a), psi_j(b)>| in the weighted product."""
    va = a.eigenvectors if isinstance(a, SpectrumSnapshot) else a.vectors
    vb = b.eigenvectors if isinstance(b, SpectrumSnapshot) else b.vectors
    if va.shape != vb.shape:
        raise ValueError(f"snapshot shapes differ: {va.shape} vs {vb.shape}")
    return OverlapReport(np.abs(_weighted_gram(va, vb, a.weight)))


def degenerate_clusters(values: np.ndarray, rel_gap: float) -> list[tuple[int, ...]]:
    """Groups of indices whose neighbouring sorted values are closer than
    ``rel_gap * (1 + |lambda|)``; singletons included."""
    order = np.argsort(values, kind="stable")
    clusters: list[list[int]] = []
    for pos, idx in enumerate(order):
        if pos and values[idx] - values[order[pos - 1]] < rel_gap * (1 + abs(values[idx])):
            clusters[-1].append(int(idx))
        else:
            clusters.append([int(idx)])
    return [tuple(sorted(c)) for c in clusters]


def _values_slopes(x) -> tuple[np.ndarray, np.ndarray | None]:
    if isinstance(x, Frame):
        return x.values, x.slopes
    return x.eigenvalues, None


def match_branches(
    a: SpectrumSnapshot | Frame,
    b: SpectrumSnapshot | Frame,
    tau: float = DEFAULT_TAU,
    eps_deg: float = DEFAULT_EPS_DEG,
) -> OverlapReport:
    """Optimal assignment of the eigenvectors of ``a`` to those of ``b``.

    Eigenvectors in a degenerate cluster (gap below ``eps_deg*(1+|lambda|)``
    on either side) are matched cluster-to-cluster; their quality is the
    cosine of the largest principal angle between the two subspaces, and
    within the cluster ties are broken by Hellmann-Feynman slopes.
    """
    rep = overlap_matrix(a, b)
    rep.tau = tau
    ov = rep.matrix
    k = ov.shape[0]
    cost = -np.log(np.maximum(ov, OVERLAP_FLOOR))
    _, perm = linear_sum_assignment(cost)
    quality = ov[np.arange(k), perm].copy()
    tracked = np.zeros(k, bool)

    vals_a, slopes_a = _values_slopes(a)
    vals_b, slopes_b = _values_slopes(b)
    va = a.eigenvectors if isinstance(a, SpectrumSnapshot) else a.vectors
    vb = b.eigenvectors if isinstance(b, SpectrumSnapshot) else b.vectors

    # union-find over a-indices: same a-cluster, or images in the same b-cluster
    parent = list(range(k))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i, j):
        parent[find(i)] = find(j)

    for cl in degenerate_clusters(vals_a, eps_deg):
        for i in cl[1:]:
            union(cl[0], i)
    inverse = np.argsort(perm)
    for cl in degenerate_clusters(vals_b, eps_deg):
        for j in cl[1:]:
            union(int(inverse[cl[0]]), int(inverse[j]))
    groups: dict[int, list[int]] = {}
    for i in range(k):
        groups.setdefault(find(i), []).append(i)
    clusters = [tuple(g) for g in groups.values() if len(g) > 1]

    for g in clusters:
        g = list(g)
        gb = perm[g]
        sv = np.linalg.svd(_weighted_gram(va[:, g], vb[:, gb], a.weight), compute_uv=False)
        subspace = float(sv.min())
        weak = quality[g] < tau
        if not weak.any():
            continue
        if slopes_a is not None and slopes_b is not None:
            sa, sb = slopes_a[g], slopes_b[gb]
            diff = np.abs(sa[:, None] - sb[None, :])
            # overlaps break exact slope ties
            _, inner = linear_sum_assignment(diff - 1e-12 * ov[np.ix_(g, gb)])
            perm[g] = gb[inner]
        for i in g:
            quality[i] = max(ov[i, perm[i]], subspace) if ov[i, perm[i]] < tau else ov[i, perm[i]]
            tracked[i] = ov[i, perm[i]] < tau

    # order changes between branches that are clearly separated at both ends
    crossings = []
    group_of = {i: find(i) for i in range(k)}
    for i in range(k):
        for j in range(k):
            if i == j or group_of[i] == group_of[j]:
                continue
            gap_a = eps_deg * (1 + max(abs(vals_a[i]), abs(vals_a[j])))
            gap_b = eps_deg * (1 + max(abs(vals_b[perm[i]]), abs(vals_b[perm[j]])))
            if vals_a[i] < vals_a[j] - gap_a and vals_b[perm[i]] > vals_b[perm[j]] + gap_b:
                crossings.append((i, j))

    rep.assignment = perm
    rep.quality = quality
    rep.min_overlap = float(quality.min()) if k else 1.0
    rep.clusters = clusters
    rep.cluster_tracked = tracked
    rep.crossings = crossings
    return rep


def hf_derivative(family, t: float, psi: np.ndarray) -> float:
    """Hellmann-Feynman slope <(A + 2tV) psi, psi> of a unit section."""
    w = family.weight
    norm2 = w * float(psi @ psi)
    if abs(norm2 - 1) > 1e-8:
        raise ValueError(f"section is not normalized (|psi|^2 = {norm2:.12g})")
    return float(w * psi @ (family.assemble_derivative(t) @ psi))


def _slopes(deriv: np.ndarray, vectors: np.ndarray, weight: float) -> np.ndarray:
    return weight * np.einsum("dk,dk->k", vectors, deriv @ vectors)


def _procrustes(block: np.ndarray, reference: np.ndarray, weight: float) -> np.ndarray:
    """Rotate the orthonormal columns of ``block`` onto the reference vectors
    that project most strongly into their span."""
    m = block.shape[1]
    proj = _weighted_gram(block, reference, weight)
    strength = np.linalg.norm(proj, axis=0)
    chosen = np.sort(np.argsort(-strength, kind="stable")[:m])
    u, _, vt = np.linalg.svd(proj[:, chosen])
    if len(chosen) < m:
        return block @ u
    return block @ (u @ vt)


class _Solver:
    def __init__(self, family, k_solve: int):
        self.family = family
        self.k_solve = k_solve
        self.cache: dict[float, SpectrumSnapshot] = {}

    def raw(self, t: float) -> SpectrumSnapshot:
        snap = self.cache.get(t)
        if snap is None:
            snap = eigendecompose(self.family.assemble(t), self.k_solve, t, self.family.weight)
            self.cache[t] = snap
        return snap

    def prefetch(self, ts, workers: int = 1):
        todo = [t for t in ts if t not in self.cache]
        if workers > 1 and len(todo) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                for t, snap in zip(todo, pool.map(self._solve, todo)):
                    self.cache[t] = snap
        else:
            for t in todo:
                self.raw(t)

    def _solve(self, t):
        return eigendecompose(self.family.assemble(t), self.k_solve, t, self.family.weight)

    def frame(self, t: float, prev: Frame | None = None) -> tuple[Frame, list[tuple[int, ...]]]:
        """Frame at t and the tight clusters whose basis stayed arbitrary."""
        snap = self.raw(t)
        w = snap.weight
        deriv = self.family.assemble_derivative(t)
        vals = snap.eigenvalues
        vecs = snap.eigenvectors.copy()
        unresolved = []
        for cl in degenerate_clusters(vals, TIGHT_DEG):
            if len(cl) < 2:
                continue
            cols = list(cl)
            block = vecs[:, cols]
            restricted = w * block.T @ deriv @ block
            restricted = (restricted + restricted.T) / 2
            s, u = np.linalg.eigh(restricted)
            if np.min(np.diff(s)) > SLOPE_TOL * (1 + np.max(np.abs(s))):
                vecs[:, cols] = block @ u
            elif prev is not None:
                vecs[:, cols] = _procrustes(block, prev.vectors, w)
            else:
                unresolved.append(cl)
        frame = Frame(
            t, vals, vecs, _slopes(deriv, vecs, w),
            residual_norms(self.family.assemble(t), vals, vecs, w), w,
        )
        return frame, unresolved


def _boundary_exchanges(rep, cur: Frame, prev_full: Frame, next_full: Frame, k: int, tau: float):
    """Explain weak matches at the top of the window as crossings with
    branches just outside it.

    A weak slot is an exchange when its old vector continues into the guard
    columns of the new frame and its new vector continues out of the guard
    columns of the old one.  Quality is upgraded in place to the smaller of
    the two continuations.
    """
    exchanged = np.zeros(k, bool)
    if next_full.vectors.shape[1] <= k or not rep.ambiguous:
        return exchanged
    w = cur.weight
    new_guard = next_full.vectors[:, k:]
    old_guard = prev_full.vectors[:, k:]
    for i in np.flatnonzero(rep.quality < tau):
        j = rep.assignment[i]
        p_out = np.linalg.norm(w * cur.vectors[:, i] @ new_guard)
        p_in = np.linalg.norm(w * next_full.vectors[:, j] @ old_guard)
        q = min(p_out, p_in)
        if q >= tau:
            rep.quality[i] = q
            rep.cluster_tracked[i] = False
            exchanged[i] = True
    rep.min_overlap = float(rep.quality.min())
    return exchanged


def _initial_frame(solver: _Solver, t0: float, first_step: float, min_step: float) -> Frame:
    frame, unresolved = solver.frame(t0)
    if not unresolved:
        return frame
    # Basis of a degeneracy whose slopes also coincide: take the limit from the right.
    eta = min_step
    while eta <= first_step * (1 + 1e-12):
        ahead, still = solver.frame(t0 + eta)
        split = all(
            not any(set(cl) & set(s) for s in still) for cl in unresolved
        )
        if split:
            frame, _ = solver.frame(t0, prev=ahead)
            return frame
        eta *= 10
    return frame


def track(
    family,
    grid: TGrid,
    k: int,
    tau: float = DEFAULT_TAU,
    eps_deg: float = DEFAULT_EPS_DEG,
    guard: int = GUARD,
    workers: int = 1,
) -> BranchSet:
    """Follow the k lowest eigenbranches of ``family`` across ``grid``."""
    dim = family.dimension
    if not 1 <= k <= dim:
        raise ValueError(f"k must lie in [1, {dim}], got {k}")
    if not 0 < tau < 1:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    solver = _Solver(family, min(dim, k + guard))
    base = grid.base
    solver.prefetch(list(base), workers)

    full = _initial_frame(solver, float(base[0]), float(base[1] - base[0]), grid.min_step)
    cur = full.head(k)
    ts = [cur.t]
    rows = {"values": [cur.values], "vectors": [cur.vectors], "slopes": [cur.slopes],
            "residuals": [cur.residuals], "quality": [np.ones(k)],
            "tracked": [np.zeros(k, bool)], "exchanged": [np.zeros(k, bool)],
            "spectrum": [full.values[:k]]}

    stack = [float(t) for t in base[:0:-1]]
    t_prev = cur.t
    refinements = 0
    while stack:
        t_next = stack[-1]
        nxt_full, _ = solver.frame(t_next, prev=full)
        nxt = nxt_full.head(k)
        rep = match_branches(cur, nxt, tau, eps_deg)
        half = (t_next - t_prev) / 2
        if (rep.ambiguous or rep.crossings) and half >= grid.min_step * (1 - 1e-12):
            stack.append(t_prev + half)
            refinements += 1
            continue
        stack.pop()
        exchanged = _boundary_exchanges(rep, cur, full, nxt_full, k, tau)
        if rep.ambiguous:
            log.info("t=%.6g: ambiguity persists at the finest step (min overlap %.3f)",
                     t_next, rep.min_overlap)
        perm = rep.assignment
        moved = nxt.take(perm)
        signs = np.sign(cur.weight * np.einsum("dk,dk->k", cur.vectors, moved.vectors))
        signs[signs == 0] = 1.0
        moved.vectors = moved.vectors * signs[None, :]
        cur, full, t_prev = moved, nxt_full, t_next
        ts.append(t_next)
        rows["values"].append(moved.values)
        rows["vectors"].append(moved.vectors)
        rows["slopes"].append(moved.slopes)
        rows["residuals"].append(moved.residuals)
        rows["quality"].append(rep.quality)
        rows["tracked"].append(rep.cluster_tracked | (rep.quality < tau))
        rows["exchanged"].append(exchanged)
        rows["spectrum"].append(nxt_full.values[:k])
    log.debug("tracked %d branches over %d nodes (%d refinements)", k, len(ts), refinements)
    return BranchSet(
        t=np.array(ts),
        values=np.array(rows["values"]),
        vectors=np.array(rows["vectors"]),
        slopes=np.array(rows["slopes"]),
        residuals=np.array(rows["residuals"]),
        quality=np.array(rows["quality"]),
        cluster_tracked=np.array(rows["tracked"]),
        exchanged=np.array(rows["exchanged"]),
        spectrum=np.array(rows["spectrum"]),
        weight=family.weight,
        base_t=base.copy(),
    )
