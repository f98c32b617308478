import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from geoembed import shapes
from geoembed.errors import DegenerateGeometryError, EmptyMeshError, MeshFormatError
from geoembed.mesh import (
    TriangleMesh, build_graph, clean_faces, compute_vertex_normals, load_mesh, mesh_checksum,
    normalize_mesh, read_ply, save_obj, save_off, save_ply,
)


def test_load_single_triangle_off(data_dir):
    m = load_mesh(data_dir / "triangle.off")
    assert (m.num_vertices, m.num_faces) == (3, 1)


def test_degenerate_face_dropped_with_warning(data_dir):
    with pytest.warns(UserWarning, match="dropped 1"):
        m = load_mesh(data_dir / "degenerate.off")
    assert m.num_faces == 1
    assert m.faces.tolist() == [[1, 3, 2]]


def test_icosahedron_obj_counts(data_dir):
    m = load_mesh(data_dir / "icosahedron.obj")
    assert (m.num_vertices, m.num_faces) == (12, 20)
    assert len(build_graph(m).edges) == 30


def test_ascii_ply_quad_is_fan_triangulated(data_dir):
    m = load_mesh(data_dir / "square.ply")
    assert m.num_faces == 2
    assert np.isclose(m.face_areas().sum(), 1.0)


def test_obj_negative_and_slashed_indices(tmp_path):
    p = tmp_path / "m.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvn 0 0 1\nf -3/1/1 -2/1/1 -1/1/1\n")
    m = load_mesh(p)
    assert m.faces.tolist() == [[0, 1, 2]]


def test_parse_error_reports_line(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 zero\nf 1 2 3\n")
    with pytest.raises(MeshFormatError) as exc:
        load_mesh(p)
    assert exc.value.line == 3


def test_off_bad_face_line_number(tmp_path):
    p = tmp_path / "bad.off"
    p.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1\n")
    with pytest.raises(MeshFormatError) as exc:
        load_mesh(p)
    assert exc.value.line == 6


def test_zero_faces_is_empty_mesh(tmp_path):
    p = tmp_path / "e.off"
    p.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 0 1\n")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(EmptyMeshError):
            load_mesh(p)


def test_unknown_format(tmp_path):
    p = tmp_path / "m.stl"
    p.write_text("solid\n")
    with pytest.raises(MeshFormatError):
        load_mesh(p)


def test_invalid_face_index_rejected():
    with pytest.raises(ValueError):
        TriangleMesh(np.zeros((3, 3)), [[0, 1, 3]])


@pytest.mark.parametrize("binary", [True, False])
def test_ply_round_trip_keeps_checksum(tmp_path, binary):
    m = normalize_mesh(shapes.bumpy_sphere(2))
    q = np.arange(m.num_vertices, dtype=float)
    save_ply(tmp_path / "m.ply", m, quality=q, binary=binary)
    pos, faces, extra = read_ply(tmp_path / "m.ply")
    assert np.array_equal(pos, m.positions)
    assert np.array_equal(faces, m.faces)
    assert np.allclose(extra["quality"], q)
    assert load_mesh(tmp_path / "m.ply").checksum == m.checksum


@pytest.mark.parametrize("writer,suffix", [(save_obj, ".obj"), (save_off, ".off")])
def test_text_round_trip(tmp_path, writer, suffix):
    m = shapes.torus(n_major=8, n_minor=5)
    writer(tmp_path / f"m{suffix}", m)
    back = load_mesh(tmp_path / f"m{suffix}")
    assert np.array_equal(back.positions, m.positions)
    assert back.checksum == m.checksum


def test_normalize_unit_cube():
    m = shapes.box((1.0, 1.0, 1.0), 2)
    m = TriangleMesh(m.positions + 0.5, m.faces)
    n = normalize_mesh(m)
    assert np.allclose(n.positions.min(axis=0), -1) and np.allclose(n.positions.max(axis=0), 1)


def test_normalize_slab_extents():
    m = shapes.box((4.0, 2.0, 1.0), 2)
    n = normalize_mesh(TriangleMesh(m.positions + [2.0, 1.0, 0.5], m.faces))
    ext = n.positions.max(axis=0) - n.positions.min(axis=0)
    assert np.allclose(ext, [2.0, 1.0, 0.5])


def test_normalize_coincident_vertices_fails():
    with pytest.raises(DegenerateGeometryError):
        normalize_mesh(TriangleMesh(np.ones((3, 3)), np.zeros((0, 3), dtype=int)))


@given(arrays(np.float64, (12, 3), elements=st.floats(-50, 50)),
       st.floats(0.01, 100), arrays(np.float64, 3, elements=st.floats(-10, 10)))
def test_normalize_properties(noise, scale, shift):
    base = shapes.icosahedron()
    pos = base.positions * 5 + noise * 0.1
    m = TriangleMesh(pos * scale + shift, base.faces)
    n = normalize_mesh(m)
    ext = n.positions.max(axis=0) - n.positions.min(axis=0)
    assert np.all(np.abs(n.positions) <= 1.0)
    assert abs(ext.max() - 2.0) < 1e-6
    # idempotent and aspect preserving
    n2 = normalize_mesh(n)
    assert np.allclose(n2.positions, n.positions, atol=1e-7)
    raw = m.positions.max(axis=0) - m.positions.min(axis=0)
    assert np.allclose(ext / ext.max(), raw / raw.max(), atol=1e-9)


def test_normals_flat_patch():
    n = compute_vertex_normals(shapes.grid(4, 4).positions, shapes.grid(4, 4).faces)
    assert np.allclose(n, [0, 0, 1])


def test_normals_icosphere_radial():
    m = shapes.icosphere(3)
    radial = m.positions / np.linalg.norm(m.positions, axis=1, keepdims=True)
    ang = np.arccos(np.clip(np.einsum("ij,ij->i", m.normals, radial), -1, 1))
    assert ang.max() < 0.05


def test_isolated_vertex_fallback_normal():
    pos = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5.0]])
    n = compute_vertex_normals(pos, np.array([[0, 1, 2]]))
    assert np.allclose(n[3], [0, 0, 1])
    assert np.allclose(np.linalg.norm(n, axis=1), 1)


@given(st.floats(0.1, 10), st.integers(0, 1000))
def test_normals_scale_and_rotation(scale, seed):
    m = shapes.bumpy_sphere(1, seed=3)
    R = shapes.random_rotation(seed)
    n0 = compute_vertex_normals(m.positions, m.faces)
    assert np.allclose(compute_vertex_normals(m.positions * scale, m.faces), n0, atol=1e-5)
    assert np.allclose(compute_vertex_normals(m.positions @ R.T, m.faces), n0 @ R.T, atol=1e-5)


def test_graph_edges():
    tri = TriangleMesh(np.eye(3), [[0, 1, 2]])
    assert len(build_graph(tri).edges) == 3
    two = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.0]]), [[0, 1, 2], [1, 3, 2]])
    assert len(build_graph(two).edges) == 5


@pytest.mark.parametrize("mesh", [shapes.icosphere(2), shapes.torus(), shapes.box(n=3)])
def test_graph_invariants_closed_mesh(mesh):
    g = build_graph(mesh)
    e = g.edges
    assert np.all(e[:, 0] < e[:, 1])
    assert len(np.unique(e, axis=0)) == len(e)
    assert g.degree().min() >= 2
    A = g.weighted_adjacency()
    assert (A != A.T).nnz == 0
    # level-0 edges are exactly the face edges
    fe = {tuple(sorted(p)) for f in mesh.faces.tolist() for p in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0]))}
    assert fe == {tuple(x) for x in e.tolist()}


def test_clean_faces_drops_zero_area():
    pos = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0.0]])
    faces, dropped = clean_faces(pos, np.array([[0, 1, 2], [0, 1, 3], [1, 1, 3]]))
    assert dropped == 2 and faces.tolist() == [[0, 1, 3]]


def test_checksum_sensitive_to_edits():
    m = shapes.icosphere(1)
    moved = m.positions.copy()
    moved[0, 0] += 1e-4
    assert mesh_checksum(TriangleMesh(moved, m.faces)) != m.checksum
    assert mesh_checksum(TriangleMesh(m.positions, m.faces[:, [1, 2, 0]])) != m.checksum
    tiny = m.positions + 1e-9
    assert mesh_checksum(TriangleMesh(tiny, m.faces)) in (m.checksum, mesh_checksum(TriangleMesh(tiny, m.faces)))


def test_mesh_is_immutable():
    m = shapes.icosahedron()
    with pytest.raises(ValueError):
        m.positions[0, 0] = 3.0
