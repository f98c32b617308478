import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from geoembed import shapes
from geoembed.applications import (
    GeodesicPath, ShapeDistribution, compare_distributions, face_gradients, path_point_in_face,
    shape_distribution, trace_geodesic_path,
)
from geoembed.errors import PartialPathError
from geoembed.mesh import TriangleMesh, normalize_mesh
from geoembed.network import batched_decode
from geoembed.oracle import DijkstraOracle, EuclideanOracle, SteinerOracle
from geoembed.query import OracleSession, open_session


@pytest.fixture(scope="module")
def plane():
    return normalize_mesh(shapes.grid(30, 30))


def field_at(mesh, d, point, face):
    P = mesh.positions[mesh.faces[face]]
    M = np.vstack([P.T, np.ones(3)])
    lam = np.linalg.lstsq(M, np.append(point, 1.0), rcond=None)[0]
    return lam @ d[mesh.faces[face]]


def check_path_invariants(mesh, path):
    for k in range(len(path) - 1):
        f = path.faces[k]
        assert path_point_in_face(mesh, path.points[k], f, 1e-6)
        assert path_point_in_face(mesh, path.points[k + 1], f, 1e-6)


def test_face_gradient_of_linear_field(plane):
    a = np.array([0.3, -0.7, 0.0])
    g = face_gradients(plane.positions, plane.faces, plane.positions @ a)
    assert np.allclose(g, a, atol=1e-9)


@pytest.mark.parametrize("oracle_cls", [EuclideanOracle, lambda m: SteinerOracle(m, 3)])
def test_planar_path_is_straight(plane, oracle_cls):
    sess = OracleSession(oracle_cls(plane), plane)
    s, t = 0, plane.num_vertices - 1
    path = trace_geodesic_path(plane, sess, s, t)
    euclid = np.linalg.norm(plane.positions[s] - plane.positions[t])
    assert abs(path.total_length - euclid) / euclid < 0.02
    assert np.allclose(path.points[0], plane.positions[t]) and np.allclose(path.points[-1], plane.positions[s])
    check_path_invariants(plane, path)


def test_neighbour_path_is_the_edge(plane):
    sess = OracleSession(EuclideanOracle(plane), plane)
    path = trace_geodesic_path(plane, sess, 40, 41)
    euclid = np.linalg.norm(plane.positions[40] - plane.positions[41])
    assert abs(path.total_length - euclid) / euclid < 0.05


def test_field_decreases_along_planar_path(plane):
    sess = OracleSession(SteinerOracle(plane, 3), plane)
    rng = np.random.default_rng(0)
    for s, t in rng.integers(0, plane.num_vertices, (5, 2)):
        if s == t:
            continue
        path = trace_geodesic_path(plane, sess, int(s), int(t))
        d = sess.distances_from(int(s))
        vals = [field_at(plane, d, p, f) for p, f in zip(path.points, path.faces)]
        assert all(b <= a + 1e-9 for a, b in zip(vals, vals[1:]))
        check_path_invariants(plane, path)


def test_path_on_curved_surface():
    m = normalize_mesh(shapes.icosphere(3))
    sess = OracleSession(SteinerOracle(m, 3), m)
    path = trace_geodesic_path(m, sess, 0, 300)
    d = sess.distances_from(0)
    assert path.total_length == pytest.approx(d[300], rel=0.05)
    check_path_invariants(m, path)


def test_trace_errors(plane):
    sess = OracleSession(EuclideanOracle(plane), plane)
    with pytest.raises(PartialPathError) as exc:
        trace_geodesic_path(plane, sess, 0, 5, max_steps=0)
    assert len(exc.value.prefix) == 0
    with pytest.raises(PartialPathError) as exc:
        trace_geodesic_path(plane, sess, 0, plane.num_vertices - 1, max_steps=3)
    assert 1 <= len(exc.value.prefix) <= 4
    with pytest.raises(ValueError):
        trace_geodesic_path(plane, sess, 3, 3)
    with pytest.raises(IndexError):
        trace_geodesic_path(plane, sess, 0, plane.num_vertices)


def test_local_minimum_gives_partial_path(plane):
    class Bumpy:
        def distances_from(self, s):
            d = np.linalg.norm(plane.positions - plane.positions[s], axis=1)
            d[450] = -1.0  # a pit away from the source
            return d

    nbr = 451
    with pytest.raises(PartialPathError):
        trace_geodesic_path(plane, Bumpy(), 0, nbr)


def test_path_obj_export(plane, tmp_path):
    sess = OracleSession(EuclideanOracle(plane), plane)
    path = trace_geodesic_path(plane, sess, 0, 99)
    path.save_obj(tmp_path / "p.obj")
    lines = (tmp_path / "p.obj").read_text().splitlines()
    assert sum(l.startswith("v ") for l in lines) == len(path)
    assert lines[-1].split()[1:] == [str(k + 1) for k in range(len(path))]


def test_geodesic_path_length():
    p = GeodesicPath([[0, 0, 0], [3, 4, 0], [3, 4, 1]], [0, 0, 0])
    assert p.total_length == 6.0
    with pytest.raises(ValueError):
        GeodesicPath([[0, 0, 0]], [0, 1])


# ---------------------------------------------------------------- distributions

def test_distribution_validation():
    with pytest.raises(ValueError):
        ShapeDistribution([0, 1], [1, 2], 3)
    with pytest.raises(ValueError):
        ShapeDistribution([0, 1, 1], [1, 2], 3)
    with pytest.raises(ValueError):
        ShapeDistribution([0, 1, 2], [1, 2], 4)


def test_equal_distances_fill_one_bin():
    tri = TriangleMesh([[0, 0, 0], [1, 0, 0], [0.5, np.sqrt(3) / 2, 0]], [[0, 1, 2]])
    h = shape_distribution(tri, OracleSession(EuclideanOracle(tri), tri), num_pairs=3, bins=8)
    assert np.count_nonzero(h.counts) == 1 and h.normalization == 3


def test_distribution_deterministic(plane):
    sess = OracleSession(EuclideanOracle(plane), plane)
    a = shape_distribution(plane, sess, 5000, 32, seed=3)
    b = shape_distribution(plane, sess, 5000, 32, seed=3)
    assert np.array_equal(a.counts, b.counts) and np.array_equal(a.bin_edges, b.bin_edges)
    assert a.counts.sum() == 5000 and a.bin_edges[0] == 0.0


def test_exhaustive_histogram_matches_brute_force():
    import torch
    from geoembed.network import GeodesicEmbeddingNet, ModelConfig
    torch.manual_seed(0)
    m = normalize_mesh(shapes.grid(4, 3))
    assert m.num_vertices == 20
    model = GeodesicEmbeddingNet(ModelConfig(channels=16))
    sess = open_session(model, m)
    h = shape_distribution(m, sess, num_pairs=190, bins=10)
    i, j = np.triu_indices(20, 1)
    d = batched_decode(sess.table, np.column_stack([i, j]), model.decoder)
    counts, edges = np.histogram(d, bins=10, range=(0, d.max()))
    assert np.array_equal(h.counts, counts) and np.allclose(h.bin_edges, edges)


def test_compare_basic_values():
    a = ShapeDistribution([0, 1, 2], [5, 5], 10)
    assert compare_distributions(a, a) == 0.0
    b = ShapeDistribution([0, 1], [4], 4)
    c = ShapeDistribution([2, 3], [7], 7)
    assert compare_distributions(b, c) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        compare_distributions(a, ShapeDistribution([0, 1], [0], 0))


def random_hist(rng):
    n = int(rng.integers(1, 6))
    edges = np.cumsum(rng.uniform(0.1, 1, n + 1)) + rng.uniform(0, 2)
    counts = rng.integers(0, 10, n)
    counts[0] += 1
    return ShapeDistribution(edges, counts, int(counts.sum()))


@given(st.integers(0, 100_000))
def test_compare_is_a_metric(seed):
    rng = np.random.default_rng(seed)
    a, b, c = random_hist(rng), random_hist(rng), random_hist(rng)
    ab, ba = compare_distributions(a, b), compare_distributions(b, a)
    assert ab == pytest.approx(ba, abs=1e-12)
    assert 0.0 <= ab <= 2.0
    assert compare_distributions(a, a) == 0.0
    assert compare_distributions(a, c) <= ab + compare_distributions(b, c) + 1e-12


def test_distribution_rigid_motion_invariant():
    m = normalize_mesh(shapes.bumpy_sphere(2))
    moved = shapes.transformed(m, rotation=shapes.random_rotation(4), translation=(0.1, -0.2, 0.05))
    ha = shape_distribution(m, OracleSession(DijkstraOracle(m), m), 2000, 16)
    hb = shape_distribution(moved, OracleSession(DijkstraOracle(moved), moved), 2000, 16)
    assert compare_distributions(ha, hb) < 0.02


def test_geodesic_distribution_survives_bending():
    flat = shapes.bent_strip(40, 6, bend=0.0)
    bent = shapes.bent_strip(40, 6, bend=1.0)
    hists = {}
    for name, oracle_cls in [("geo", lambda m: SteinerOracle(m, 3)), ("euc", EuclideanOracle)]:
        hists[name] = [shape_distribution(m, OracleSession(oracle_cls(m), m), 20_000, 32, seed=1)
                       for m in (flat, bent)]
    geo = compare_distributions(*hists["geo"])
    euc = compare_distributions(*hists["euc"])
    assert geo < euc


def test_histogram_text_export(tmp_path):
    h = ShapeDistribution([0, 1, 2], [1, 3], 4)
    h.save_text(tmp_path / "h.txt")
    data = np.loadtxt(tmp_path / "h.txt")
    assert data.tolist() == [[0.5, 0.25], [1.5, 0.75]]
