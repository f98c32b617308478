import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.sparse import csgraph

from geoembed import shapes
from geoembed.errors import ChecksumMismatchError, MeshFormatError
from geoembed.mesh import TriangleMesh, VertexGraph, build_graph, normalize_mesh
from geoembed.oracle import (
    BiharmonicOracle, DijkstraOracle, EuclideanOracle, GeodesicSampleSet, SteinerOracle, biharmonic_distances,
    build_spectral_basis, cotangent_laplacian, dijkstra_distances, sample_pairs, steiner_refined_distances,
)


def great_circle(p, q):
    return np.arccos(np.clip(np.einsum("ij,ij->i", p, q), -1.0, 1.0))


def test_dijkstra_single_edge_and_source():
    tri = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [0.5, np.sqrt(3) / 2, 0]]), [[0, 1, 2]])
    d = dijkstra_distances(build_graph(tri), 0)
    assert d[0] == 0 and np.isclose(d[1], 1.0)


def test_dijkstra_path_graph():
    g = VertexGraph(np.array([[0, 0, 0], [1, 0, 0], [1, 2, 0.0]]), np.tile([0, 0, 1.0], (3, 1)),
                    np.array([[0, 1], [1, 2]]))
    assert np.isclose(dijkstra_distances(g, 0)[2], 3.0)


def test_dijkstra_unreachable_is_inf():
    m = shapes.concatenate([shapes.icosahedron(), shapes.transformed(shapes.icosahedron(), translation=[5, 0, 0])])
    d = dijkstra_distances(build_graph(m), 0)
    assert np.all(np.isinf(d[12:])) and np.all(np.isfinite(d[:12]))


def test_steiner_k0_equals_dijkstra():
    m = shapes.bumpy_sphere(2)
    assert np.array_equal(steiner_refined_distances(m, 5, 0), dijkstra_distances(build_graph(m), 5))


def test_steiner_bounds_and_nesting():
    m = shapes.bumpy_sphere(2, seed=1)
    src = [0, 17, 80]
    dij = DijkstraOracle(m).fields(src)
    k1 = SteinerOracle(m, 1).fields(src)
    k3 = SteinerOracle(m, 3).fields(src)
    euc = EuclideanOracle(m).fields(src)
    assert np.all(k1 <= dij + 1e-12)
    # the k=1 midpoints are a subset of the k=3 points, so k=3 can only be shorter
    assert np.all(k3 <= k1 + 1e-12)
    assert np.all(euc <= k3 + 1e-12)


def test_steiner_planar_grid_close_to_euclidean():
    m = shapes.grid(20, 20)
    d = steiner_refined_distances(m, 0, 3)
    far = np.linalg.norm(m.positions, axis=1) > 0.5
    rel = d[far] / np.linalg.norm(m.positions[far], axis=1) - 1
    # upper bound everywhere; mean excess under 1%, worst direction about 1.3%
    assert rel.min() >= -1e-12
    assert rel.mean() < 0.01 and rel.max() < 0.015


def test_steiner_sphere_error_decreases_with_k():
    m = shapes.icosphere(3)
    rng = np.random.default_rng(1)
    i, j = rng.integers(0, m.num_vertices, (2, 100))
    keep = i != j
    i, j = i[keep], j[keep]
    gc = great_circle(m.positions[i], m.positions[j])
    errs = []
    for k in (0, 1, 3):
        f = SteinerOracle(m, k).fields(np.unique(i))
        row = {s: r for s, r in zip(np.unique(i), f)}
        d = np.array([row[a][b] for a, b in zip(i, j)])
        errs.append(np.mean(np.abs(d - gc) / gc))
    assert errs[0] > errs[1] > errs[2]


def test_graph_metric_triangle_inequality():
    m = shapes.torus(n_major=12, n_minor=6)
    D = SteinerOracle(m, 2).fields(np.arange(m.num_vertices))
    assert np.allclose(D, D.T)
    rng = np.random.default_rng(0)
    a, b, c = rng.integers(0, m.num_vertices, (3, 2000))
    assert np.all(D[a, c] <= D[a, b] + D[b, c] + 1e-12)


def test_sample_pairs_full_field():
    m = shapes.icosphere(1)
    s = sample_pairs(m, 1, m.num_vertices - 1, SteinerOracle(m, 1), seed=3)
    assert len(s) == m.num_vertices - 1
    assert len(np.unique(s.i)) == 1 and len(np.unique(s.j)) == m.num_vertices - 1
    field = steiner_refined_distances(m, int(s.i[0]), 1)
    assert np.allclose(s.d, field[s.j].astype(np.float32))


def test_sample_pairs_invariants_and_determinism():
    m = shapes.icosphere(2)
    o = SteinerOracle(m, 1)
    a = sample_pairs(m, 20, 30, o, seed=5)
    b = sample_pairs(m, 20, 30, o, seed=5)
    assert a.to_bytes() == b.to_bytes()
    assert np.all(a.i != a.j) and np.all(a.d > 0)
    lo, hi = np.minimum(a.i, a.j), np.maximum(a.i, a.j)
    assert len(np.unique(lo * m.num_vertices + hi)) == len(a)
    assert len(a) + a.dropped_duplicates == 600
    k = 7
    assert a.distance(int(a.i[k]), int(a.j[k])) == a.distance(int(a.j[k]), int(a.i[k]))


def test_sample_pairs_drops_cross_component_pairs():
    m = shapes.concatenate([shapes.icosphere(1), shapes.transformed(shapes.icosphere(1), translation=[4, 0, 0])])
    o = SteinerOracle(m, 1)
    s = sample_pairs(m, 30, 40, o, seed=2)
    comp = csgraph.connected_components(build_graph(m).weighted_adjacency(), directed=False)[1]
    # brute-force replay of the same draw
    rng = np.random.default_rng(2)
    V = m.num_vertices
    src = rng.choice(V, size=30, replace=False)
    pairs = set()
    for sv in src:
        t = rng.choice(V - 1, size=40, replace=False)
        for dv in t + (t >= sv):
            pairs.add((min(sv, dv), max(sv, dv)))
    cross = sum(comp[a] != comp[b] for a, b in pairs)
    assert cross > 0 and s.dropped_unreachable == cross
    assert len(s) == len(pairs) - cross
    assert np.all(comp[s.i] == comp[s.j])


def test_sample_pairs_rejects_bad_arguments():
    m = shapes.icosahedron()
    with pytest.raises(ValueError):
        sample_pairs(m, 13, 2, SteinerOracle(m))
    with pytest.raises(ValueError):
        sample_pairs(m, 1, 0, SteinerOracle(m))
    with pytest.raises(ValueError):
        sample_pairs(TriangleMesh(np.zeros((1, 3)), np.zeros((0, 3), dtype=int)), 1, 1, None)


def test_gset_round_trip_and_errors(tmp_path):
    m = shapes.icosphere(2)
    s = sample_pairs(m, 5, 10, SteinerOracle(m, 1), seed=0)
    s.save(tmp_path / "a.gset")
    back = GeodesicSampleSet.load(tmp_path / "a.gset")
    back.save(tmp_path / "b.gset")
    assert (tmp_path / "a.gset").read_bytes() == (tmp_path / "b.gset").read_bytes()
    assert np.array_equal(back.i, s.i) and np.array_equal(back.d, s.d)
    back.check_mesh(m)
    with pytest.raises(ChecksumMismatchError):
        back.check_mesh(shapes.icosphere(1))
    data = (tmp_path / "a.gset").read_bytes()
    with pytest.raises(MeshFormatError):
        GeodesicSampleSet.from_bytes(b"XSET" + data[4:])
    with pytest.raises(MeshFormatError):
        GeodesicSampleSet.from_bytes(data[:-1])


@given(st.lists(st.tuples(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1),
                          st.floats(0, 1e6, width=32)), max_size=30),
       st.integers(0, 2**64 - 1))
def test_gset_bytes_round_trip_property(records, checksum):
    records = [r for r in records if r[0] != r[1]]
    i, j, d = (np.array([r[k] for r in records]) for k in range(3))
    s = GeodesicSampleSet(i, j, d, checksum)
    data = s.to_bytes()
    assert GeodesicSampleSet.from_bytes(data).to_bytes() == data


def test_laplacian_structure():
    m = shapes.bumpy_sphere(2)
    L, mass = cotangent_laplacian(m)
    assert np.allclose(L @ np.ones(m.num_vertices), 0, atol=1e-10)
    assert abs(L - L.T).max() < 1e-12
    assert np.all(mass > 0) and np.isclose(mass.sum(), m.face_areas().sum())
    x = np.random.default_rng(0).normal(size=m.num_vertices)
    assert x @ (L @ x) >= 0


def test_square_grid_first_eigenvalue():
    basis = build_spectral_basis(shapes.grid(24, 24), 4)
    assert abs(basis.eigenvalues[0] / np.pi ** 2 - 1) < 0.10
    assert basis.eigenvalues[0] > 1e-9 and np.all(np.diff(basis.eigenvalues) >= 0)


def test_sphere_spectrum():
    basis = build_spectral_basis(shapes.icosphere(3), 8)
    # unit sphere: l(l+1) with multiplicity 2l+1
    assert np.allclose(basis.eigenvalues[:3], 2.0, rtol=0.02)
    assert np.allclose(basis.eigenvalues[3:8], 6.0, rtol=0.03)
    assert basis.orthonormality_error() < 1e-5


def test_sparse_solver_path_orthonormal():
    m = shapes.icosphere(5)  # above the dense limit
    basis = build_spectral_basis(m, 10)
    assert basis.orthonormality_error() < 1e-5
    assert np.allclose(basis.eigenvalues[:3], 2.0, rtol=0.02)


def test_small_mesh_mode_count():
    m = shapes.fibonacci_sphere(10)
    assert build_spectral_basis(m, 3).num_modes == 3


def test_biharmonic_properties():
    m = normalize_mesh(shapes.fibonacci_sphere(200))
    full = build_spectral_basis(m, m.num_vertices - 1)
    D_full = BiharmonicOracle(m, full).fields(np.arange(m.num_vertices))
    assert np.all(np.diag(D_full) == 0)
    assert np.array_equal(D_full, D_full.T)
    devs = []
    for k in (10, 25, 50):
        D = BiharmonicOracle(m, build_spectral_basis(m, k)).fields(np.arange(m.num_vertices))
        off = ~np.eye(m.num_vertices, dtype=bool)
        devs.append(np.mean(np.abs(D[off] - D_full[off]) / D_full[off]))
    assert devs[0] > devs[1] > devs[2] and devs[2] < 0.05


def test_biharmonic_rejects_stale_basis():
    basis = build_spectral_basis(shapes.icosphere(2), 5)
    with pytest.raises(ChecksumMismatchError):
        biharmonic_distances(shapes.icosphere(2, radius=2.0), 0, basis)


def test_disconnected_mesh_drops_one_constant_mode_per_component():
    m = shapes.concatenate([shapes.icosphere(2), shapes.transformed(shapes.icosphere(2), translation=[4, 0, 0])])
    basis = build_spectral_basis(m, 6)
    assert basis.eigenvalues[0] > 1e-3
    assert basis.orthonormality_error() < 1e-5
