import numpy as np
import pytest

from geoembed import shapes
from geoembed.mesh import build_graph


@pytest.mark.parametrize("level,count", [(0, 12), (1, 42), (2, 162), (3, 642), (4, 2562)])
def test_icosphere_vertex_counts(level, count):
    m = shapes.icosphere(level)
    assert m.num_vertices == count
    assert np.allclose(np.linalg.norm(m.positions, axis=1), 1.0)


@pytest.mark.parametrize("mesh,chi", [
    (shapes.icosphere(2), 2), (shapes.box(n=4), 2), (shapes.cylinder(), 2),
    (shapes.torus(), 0), (shapes.fibonacci_sphere(200), 2),
])
def test_euler_characteristic(mesh, chi):
    E = len(build_graph(mesh).edges)
    assert mesh.num_vertices - E + mesh.num_faces == chi


@pytest.mark.parametrize("mesh", [shapes.icosphere(2), shapes.box(n=3), shapes.cylinder(), shapes.fibonacci_sphere(100)])
def test_closed_shapes_face_outward(mesh):
    c = mesh.positions.mean(axis=0)
    p = mesh.positions[mesh.faces]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    assert np.all(np.einsum("ij,ij->i", n, p.mean(axis=1) - c) > 0)


def test_bent_strip_preserves_edge_lengths():
    flat = build_graph(shapes.bent_strip(bend=0)).edge_lengths()
    bent = build_graph(shapes.bent_strip(bend=1)).edge_lengths()
    assert np.allclose(flat, bent, rtol=0.01)


def test_two_sided_plate_normals_opposite():
    m = shapes.two_sided_plate(4)
    half = m.num_vertices // 2
    assert np.allclose(m.positions[:half], m.positions[half:])
    assert np.allclose(m.normals[:half], [0, 0, 1]) and np.allclose(m.normals[half:], [0, 0, -1])


def test_random_rotation_is_proper():
    R = shapes.random_rotation(7)
    assert np.allclose(R @ R.T, np.eye(3)) and np.isclose(np.linalg.det(R), 1.0)
