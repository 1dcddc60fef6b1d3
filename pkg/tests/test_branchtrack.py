import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from eigenbranch.branchtrack import (
    TGrid, degenerate_clusters, hf_derivative, match_branches, overlap_matrix, track,
)
from eigenbranch.eigensolve import SpectrumSnapshot, eigendecompose
from eigenbranch.functions import parse_function
from eigenbranch.operators import CircleGrid, MatrixFamily, build_potential_family
from tests.oracles import avoided_crossing_branches, fd_eigenvalue_derivative


def snap(vectors, values=None, t=0.0):
    vectors = np.asarray(vectors, float)
    k = vectors.shape[1]
    values = np.arange(k, dtype=float) if values is None else np.asarray(values, float)
    return SpectrumSnapshot(t, values, vectors, np.zeros(k))


def crossing_family():
    return MatrixFamily(np.diag([0.0, 1.0]), np.diag([1.0, -1.0]), np.zeros((2, 2)))


def avoided_family(eps=1e-3):
    return MatrixFamily(np.array([[0.0, eps], [eps, 1.0]]), np.diag([1.0, -1.0]), np.zeros((2, 2)))


# ---- overlaps and matching --------------------------------------------------

def test_overlap_identical():
    np.testing.assert_allclose(overlap_matrix(snap(np.eye(3)), snap(np.eye(3))).matrix, np.eye(3))


def test_overlap_swapped():
    m = overlap_matrix(snap(np.eye(2)), snap(np.eye(2)[:, ::-1])).matrix
    np.testing.assert_allclose(m, [[0, 1], [1, 0]])


def test_overlap_rotated_degenerate_basis():
    c = np.cos(np.pi / 4)
    rot = np.array([[c, -c], [c, c]])
    m = overlap_matrix(snap(np.eye(2), [1, 1]), snap(rot, [1, 1])).matrix
    np.testing.assert_allclose(m, np.full((2, 2), 1 / np.sqrt(2)))


def test_overlap_shape_mismatch():
    with pytest.raises(ValueError):
        overlap_matrix(snap(np.eye(3)), snap(np.eye(3)[:, :2]))


def test_overlap_entries_bounded(rng):
    q1, _ = np.linalg.qr(rng.normal(size=(20, 5)))
    q2, _ = np.linalg.qr(rng.normal(size=(20, 5)))
    m = overlap_matrix(snap(q1), snap(q2)).matrix
    assert np.all((m >= 0) & (m <= 1 + 1e-10))


def test_match_identical_is_identity():
    rep = match_branches(snap(np.eye(4)), snap(np.eye(4)))
    np.testing.assert_array_equal(rep.assignment, np.arange(4))
    assert rep.min_overlap == pytest.approx(1.0)
    assert not rep.ambiguous


def test_match_follows_eigenvector_through_crossing():
    fam = crossing_family()
    a = eigendecompose(fam.assemble(0.45), 2, 0.45)
    b = eigendecompose(fam.assemble(0.55), 2, 0.55)
    rep = match_branches(a, b)
    # the branch lambda = t sits at index 0 before and index 1 after
    assert rep.assignment.tolist() == [1, 0]
    assert rep.crossings


def test_match_keeps_sorted_labels_at_avoided_crossing():
    fam = avoided_family()
    a = eigendecompose(fam.assemble(0.4999), 2, 0.4999)
    b = eigendecompose(fam.assemble(0.5001), 2, 0.5001)
    rep = match_branches(a, b)
    assert rep.assignment.tolist() == [0, 1]
    assert not rep.crossings


def test_match_flags_ambiguity():
    c = np.cos(np.pi / 4)
    rot = np.array([[c, -c], [c, c]])
    rep = match_branches(snap(np.eye(2), [0, 1]), snap(rot, [0, 1]))
    assert rep.ambiguous


def test_degenerate_cluster_uses_subspace_quality():
    c = np.cos(np.pi / 4)
    rot = np.array([[c, -c], [c, c]])
    rep = match_branches(snap(np.eye(2), [1, 1]), snap(rot, [1, 1]))
    assert rep.clusters == [(0, 1)]
    assert rep.min_overlap == pytest.approx(1.0)
    assert rep.cluster_tracked.all()


def test_degenerate_clusters():
    assert degenerate_clusters(np.array([0.0, 1.0, 1.0 + 1e-9, 3.0]), 1e-6) == [(0,), (1, 2), (3,)]


# ---- the tracker on closed-form families -------------------------------------

def test_tracks_diagonal_crossing():
    bs = track(crossing_family(), TGrid.uniform(0, 1, 21), 2)
    np.testing.assert_allclose(bs.values[:, 0], bs.t, atol=1e-8)
    np.testing.assert_allclose(bs.values[:, 1], 1 - bs.t, atol=1e-8)
    np.testing.assert_allclose(bs.slopes, np.column_stack([np.ones(bs.n_nodes), -np.ones(bs.n_nodes)]), atol=1e-12)
    assert not bs.check_invariants()


def test_tracks_avoided_crossing():
    bs = track(avoided_family(), TGrid.uniform(0, 1, 21), 2)
    lo, hi = avoided_crossing_branches(bs.t, 1e-3)
    np.testing.assert_allclose(bs.values[:, 0], lo, atol=1e-8)
    np.testing.assert_allclose(bs.values[:, 1], hi, atol=1e-8)
    assert not bs.check_invariants()


def test_tracks_triple_crossing():
    # three lines meeting pairwise at t = 0.5, 0.625 and 0.75
    fam = MatrixFamily(np.diag([0.0, 0.5, 1.5]), np.diag([1.0, 0.0, -1.0]), np.zeros((3, 3)))
    bs = track(fam, TGrid.uniform(0, 1.5, 24), 3)
    lines = np.column_stack([bs.t, 0.5 + 0 * bs.t, 1.5 - bs.t])
    np.testing.assert_allclose(bs.values, lines, atol=1e-8)


def test_refinement_stability():
    fam = MatrixFamily(np.diag([0.0, 0.5, 1.5]), np.diag([1.0, 0.0, -1.0]), np.zeros((3, 3)))
    coarse = track(fam, TGrid.uniform(0, 1.5, 12), 3)
    fine = track(fam, TGrid.uniform(0, 1.5, 24), 3)
    for t, row in zip(coarse.t, coarse.values):
        i = int(np.argmin(np.abs(fine.t - t)))
        if abs(fine.t[i] - t) < 1e-12:
            np.testing.assert_allclose(fine.values[i], row, atol=1e-10)


@given(st.lists(st.tuples(st.floats(-1, 1), st.floats(-2, 2)), min_size=2, max_size=4))
def test_random_diagonal_lines(lines):
    a = np.array([p[0] for p in lines])
    b = np.array([p[1] for p in lines])
    assume(np.min(np.diff(np.sort(a))) > 0.05)
    assume(np.min(np.abs(b[:, None] - b[None, :]) + np.eye(len(b)) * 9) > 0.05)
    k = len(lines)
    fam = MatrixFamily(np.diag(a), np.diag(b), np.zeros((k, k)))
    bs = track(fam, TGrid.uniform(0, 1, 16), k)
    order = np.argsort(a)
    np.testing.assert_allclose(bs.values, a[order] + np.outer(bs.t, b[order]), atol=1e-8)


def test_constant_family_is_static():
    g = CircleGrid(32)
    fam = build_potential_family(g, parse_function("zero"))
    bs = track(fam, TGrid.uniform(0, 5, 10), 4)
    np.testing.assert_allclose(bs.values, np.broadcast_to(bs.values[0], bs.values.shape), atol=1e-12)
    assert bs.quality.min() > 0.999


def test_constant_potential_shifts_by_t_squared():
    g = CircleGrid(64)
    fam = build_potential_family(g, parse_function("const:2"))
    bs = track(fam, TGrid.uniform(0, 10, 20), 5)
    np.testing.assert_allclose(bs.values, bs.values[0] + 2 * bs.t[:, None] ** 2, rtol=1e-10, atol=1e-10)


def test_witten_tracking_properties(witten_256):
    fam, bs = witten_256
    assert bs.quality.min() >= 0.75
    assert not bs.check_invariants()
    for i, t in enumerate(bs.t):
        ref = np.linalg.eigvalsh(fam.assemble(t))[: bs.k]
        np.testing.assert_allclose(np.sort(bs.values[i]), ref, atol=1e-10 * (1 + np.abs(ref)).max())


def test_witten_hf_matches_finite_differences(witten_256):
    fam, bs = witten_256
    for i in range(1, bs.n_nodes, 7):
        t = bs.t[i]
        order = np.argsort(bs.values[i])
        for j in range(bs.k):
            if bs.quality[i, j] < 0.75 or bs.cluster_tracked[i, j]:
                continue
            idx = int(np.flatnonzero(order == j)[0])
            fd = fd_eigenvalue_derivative(fam.assemble, t, idx)
            assert abs(bs.slopes[i, j] - fd) <= 1e-4 * (1 + abs(fd))


def test_gauge_nonnegative_and_flip_canonicalizes(witten_256, rng):
    _, bs = witten_256
    ov = bs.weight * np.einsum("ndk,ndk->nk", bs.vectors[:-1], bs.vectors[1:])
    assert ov.min() >= 0
    flipped = bs.flip_signs(rng.random(bs.values.shape) < 0.5)
    assert any("negative gauge" in p for p in flipped.check_invariants())
    np.testing.assert_array_equal(flipped.gauge_fixed().vectors, bs.gauge_fixed().vectors)


def test_parallel_snapshots_give_identical_result():
    g = CircleGrid(128)
    fam = build_potential_family(g, parse_function("sin2"))
    grid = TGrid.uniform(0, 10, 20)
    a, b = track(fam, grid, 4, workers=1), track(fam, grid, 4, workers=3)
    assert np.array_equal(a.values, b.values) and np.array_equal(a.vectors, b.vectors)


# ---- Hellmann-Feynman ----------------------------------------------------------

def test_hf_constant_potential(rng):
    g = CircleGrid(32)
    fam = build_potential_family(g, parse_function("const:3"))
    psi = rng.normal(size=32)
    psi /= np.sqrt(g.spacing * psi @ psi)
    assert hf_derivative(fam, 2.5, psi) == pytest.approx(15.0)


def test_hf_constant_a(rng):
    g = CircleGrid(32)
    fam = build_potential_family(g, parse_function("zero"), parse_function("const:-1.5"))
    psi = rng.normal(size=32)
    psi /= np.sqrt(g.spacing * psi @ psi)
    assert hf_derivative(fam, 7.0, psi) == pytest.approx(-1.5)


def test_hf_rejects_unnormalized():
    g = CircleGrid(16)
    fam = build_potential_family(g, parse_function("sin2"))
    with pytest.raises(ValueError):
        hf_derivative(fam, 1.0, np.ones(16))


# ---- grid validation -----------------------------------------------------------

def test_tgrid_uniform():
    grid = TGrid.uniform(0, 40, 80)
    assert len(grid.base) == 81 and grid.min_step == pytest.approx(4e-3)


@pytest.mark.parametrize("base, min_step", [
    ([0.0], 0.1), ([-1.0, 0.0], 0.1), ([0.0, 1.0, 0.5], 0.1), ([0.0, 0.05], 0.1), ([0.0, 1.0], 0.0),
])
def test_tgrid_rejects(base, min_step):
    with pytest.raises(ValueError):
        TGrid(np.array(base), min_step)


def test_track_rejects_bad_arguments():
    fam = crossing_family()
    with pytest.raises(ValueError):
        track(fam, TGrid.uniform(0, 1, 8), 3)
    with pytest.raises(ValueError):
        track(fam, TGrid.uniform(0, 1, 8), 2, tau=1.5)
