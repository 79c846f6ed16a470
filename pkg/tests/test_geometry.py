import numpy as np
import pytest

from spinconv.geometry import (
    AtomicSystem,
    build_neighbor_graph,
    edge_frame,
    project_to_sphere,
)
from spinconv.model import random_rotations


def _projections(system, cutoff=6.0):
    """Per edge e (in graph order): d, and (phi, theta) of every other incoming neighbor of src."""
    g = build_neighbor_graph(system, cutoff)
    out = []
    for e in range(g.n_edges):
        s, t = g.src[e], g.dst[e]
        frame = edge_frame(g.unit[e])
        incoming = np.flatnonzero(g.dst == s)
        vecs = g.unit[incoming]
        phi, theta = project_to_sphere(frame, vecs)
        out.append((s, t, g.distances[e], g.src[incoming], phi, theta))
    return g, out


def test_two_atoms_within_cutoff():
    g = build_neighbor_graph(AtomicSystem([[0, 0, 0], [3, 0, 0]], [1, 1]), 6.0)
    assert sorted(zip(g.src.tolist(), g.dst.tolist())) == [(0, 1), (1, 0)]
    np.testing.assert_array_equal(g.distances, [3.0, 3.0])


def test_two_atoms_beyond_cutoff():
    g = build_neighbor_graph(AtomicSystem([[0, 0, 0], [7, 0, 0]], [1, 1]), 6.0)
    assert g.n_edges == 0
    assert g.isolated.all()


def test_thirty_nearest_of_thirty_five(rng):
    radii = np.linspace(1.0, 5.5, 35)
    dirs = rng.normal(size=(35, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pos = np.vstack([[0, 0, 0], dirs * radii[:, None]])
    system = AtomicSystem(pos, np.ones(36, dtype=int))
    g = build_neighbor_graph(system, 6.0, 30)
    nbrs = g.neighbors(0)
    assert len(nbrs) == 30
    d = np.linalg.norm(pos[1:], axis=1)
    np.testing.assert_array_equal(np.sort(nbrs), np.sort(np.argsort(d)[:30] + 1))


def test_tie_break_prefers_lower_index():
    pos = [[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0]]
    g = build_neighbor_graph(AtomicSystem(pos, [1, 1, 1, 1]), 6.0, 2)
    assert g.neighbors(0).tolist() == [1, 2]


def test_overlap_rejected():
    with pytest.raises(ValueError, match="apart"):
        AtomicSystem([[0, 0, 0], [0.05, 0, 0]], [1, 1])


@pytest.mark.parametrize("numbers", [[0, 1], [101, 1]])
def test_bad_atomic_numbers(numbers):
    with pytest.raises(ValueError):
        AtomicSystem([[0, 0, 0], [1, 0, 0]], numbers)


def test_isolated_atom_flagged():
    g = build_neighbor_graph(AtomicSystem([[0, 0, 0], [1, 0, 0], [20, 0, 0]], [1, 1, 1]))
    assert g.isolated.tolist() == [False, False, True]


def test_frame_of_z_is_identity():
    np.testing.assert_array_equal(edge_frame(np.array([0.0, 0.0, 1.0])), np.eye(3))


def test_frame_of_minus_z_uses_fallback():
    r = edge_frame(np.array([0.0, 0.0, -1.0]))
    np.testing.assert_allclose(r @ [0, 0, -1], [0, 0, 1], atol=1e-15)
    # the fallback reference is world x, so x' is along x
    np.testing.assert_allclose(r[0], [1, 0, 0], atol=1e-15)


def test_random_frames_are_rotations(rng):
    for _ in range(200):
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        r = edge_frame(u)
        assert np.max(np.abs(r.T @ r - np.eye(3))) < 1e-12
        assert abs(np.linalg.det(r) - 1.0) < 1e-12
        assert np.max(np.abs(r @ u - [0, 0, 1])) < 1e-12


def test_frame_rejects_non_unit():
    with pytest.raises(ValueError):
        edge_frame(np.array([0.0, 0.0, 1.01]))


def test_projection_examples(rng):
    u = rng.normal(size=3)
    u /= np.linalg.norm(u)
    perp = np.cross(u, rng.normal(size=3))
    perp /= np.linalg.norm(perp)
    phi, theta = project_to_sphere(edge_frame(u), np.stack([u, -u, perp]))
    assert abs(phi[0]) < 1e-7 and theta[0] == 0.0
    assert abs(phi[1] - np.pi) < 1e-7 and theta[1] == 0.0
    assert abs(phi[2] - np.pi / 2) < 1e-12


def _compare(p0, p1, tol):
    for a, b in zip(p0, p1):
        assert abs(a[2] - b[2]) <= tol
        assert np.max(np.abs(a[4] - b[4]), initial=0.0) <= tol
        assert np.max(np.abs(a[5] - b[5]), initial=0.0) <= tol


def test_translation_is_bitwise_on_a_dyadic_grid(cluster):
    # sums of multiples of 2**-10 of this size are exact in float64
    pos = np.round(cluster.positions * 1024) / 1024
    shift = np.array([3.25, -1.5, 0.75])
    g0, p0 = _projections(AtomicSystem(pos, cluster.numbers))
    g1, p1 = _projections(AtomicSystem(pos + shift, cluster.numbers))
    np.testing.assert_array_equal(g0.src, g1.src)
    _compare(p0, p1, 0.0)


def test_translation_general(cluster, rng):
    g0, p0 = _projections(cluster)
    for _ in range(5):
        g1, p1 = _projections(AtomicSystem(cluster.positions + rng.normal(0, 5, 3), cluster.numbers))
        np.testing.assert_array_equal(g0.src, g1.src)
        _compare(p0, p1, 1e-12)


def test_permutation_equivariance(cluster, rng):
    perm = rng.permutation(len(cluster))
    permuted = AtomicSystem(cluster.positions[perm], cluster.numbers[perm])
    _, p0 = _projections(cluster)
    _, p1 = _projections(permuted)
    by_edge = {(s, t): (d, dict(zip(n.tolist(), zip(ph, th)))) for s, t, d, n, ph, th in p0}
    for s, t, d, n, ph, th in p1:
        d0, angles = by_edge[(perm[s], perm[t])]
        assert d == d0
        for k, src in enumerate(n.tolist()):
            np.testing.assert_array_equal(angles[perm[src]], (ph[k], th[k]))


def test_rotation_shifts_theta_by_a_constant_per_edge(cluster, rng):
    _, p0 = _projections(cluster)
    for q in random_rotations(rng, 10):
        _, p1 = _projections(AtomicSystem(cluster.positions @ q.T, cluster.numbers))
        for a, b in zip(p0, p1):
            assert abs(a[2] - b[2]) < 1e-10
            np.testing.assert_allclose(a[4], b[4], atol=1e-10)
            off_pole = (a[4] > 1e-6) & (a[4] < np.pi - 1e-6)
            delta = np.angle(np.exp(1j * (b[5] - a[5])[off_pole]))
            assert np.max(np.abs(np.angle(np.exp(1j * (delta - delta[0]))))) < 1e-10
