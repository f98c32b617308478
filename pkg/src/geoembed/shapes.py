"""Procedural test meshes.

Everything here returns raw (unnormalized) :class:`TriangleMesh` objects.
"""

import numpy as np
from scipy.spatial import ConvexHull

from .mesh import TriangleMesh, normalize_mesh

_PHI = (1.0 + 5.0 ** 0.5) / 2.0

ICOSAHEDRON_VERTICES = np.array([
    [-1, _PHI, 0], [1, _PHI, 0], [-1, -_PHI, 0], [1, -_PHI, 0],
    [0, -1, _PHI], [0, 1, _PHI], [0, -1, -_PHI], [0, 1, -_PHI],
    [_PHI, 0, -1], [_PHI, 0, 1], [-_PHI, 0, -1], [-_PHI, 0, 1],
], dtype=np.float64)

ICOSAHEDRON_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
], dtype=np.int64)


def icosahedron():
    v = ICOSAHEDRON_VERTICES / np.linalg.norm(ICOSAHEDRON_VERTICES, axis=1, keepdims=True)
    return TriangleMesh(v, ICOSAHEDRON_FACES)


def icosphere(level=3, radius=1.0):
    """Subdivided icosahedron projected onto a sphere.

    Vertex counts are ``10 * 4**level + 2``: 12, 42, 162, 642, 2562, 10242, 40962.
    """
    v = ICOSAHEDRON_VERTICES / np.linalg.norm(ICOSAHEDRON_VERTICES, axis=1, keepdims=True)
    f = ICOSAHEDRON_FACES.copy()
    for _ in range(level):
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        mid = 0.5 * (v[uniq[:, 0]] + v[uniq[:, 1]])
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m = len(v) + inv.reshape(3, -1).T  # midpoints of edges (01, 12, 20)
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        ab, bc, ca = m[:, 0], m[:, 1], m[:, 2]
        f = np.concatenate([
            np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
            np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1),
        ])
        v = np.concatenate([v, mid])
    return TriangleMesh(v * radius, f)


def fibonacci_sphere(n, radius=1.0):
    """Sphere with exactly ``n`` near-uniform vertices (convex hull triangulation)."""
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    r = np.sqrt(1.0 - z * z)
    theta = np.pi * (1.0 + 5.0 ** 0.5) * k
    v = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    hull = ConvexHull(v)
    faces = hull.simplices.copy()
    # orient outward
    p = v[faces]
    nrm = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    flip = np.einsum("ij,ij->i", nrm, p.mean(axis=1)) < 0
    faces[flip] = faces[flip][:, ::-1]
    return TriangleMesh(v * radius, faces)


def grid(nx=10, ny=10, width=1.0, height=1.0, diagonal="alternate"):
    """Planar rectangle ``[0, width] x [0, height]`` in the z=0 plane.

    ``diagonal`` chooses how quads are split: "alternate" flips every other
    quad, which avoids a directional bias in graph distances.
    """
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    v = np.stack([X.ravel(), Y.ravel(), np.zeros(X.size)], axis=1)
    idx = np.arange((nx + 1) * (ny + 1)).reshape(nx + 1, ny + 1)
    faces = []
    for i in range(nx):
        for j in range(ny):
            a, b, c, d = idx[i, j], idx[i + 1, j], idx[i + 1, j + 1], idx[i, j + 1]
            if diagonal == "alternate" and (i + j) % 2:
                faces += [(a, b, d), (b, c, d)]
            else:
                faces += [(a, b, c), (a, c, d)]
    return TriangleMesh(v, np.array(faces))


def torus(major=1.0, minor=0.35, n_major=32, n_minor=12):
    u = np.linspace(0, 2 * np.pi, n_major, endpoint=False)
    w = np.linspace(0, 2 * np.pi, n_minor, endpoint=False)
    U, W = np.meshgrid(u, w, indexing="ij")
    x = (major + minor * np.cos(W)) * np.cos(U)
    y = (major + minor * np.cos(W)) * np.sin(U)
    z = minor * np.sin(W)
    v = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    faces = []
    for i in range(n_major):
        for j in range(n_minor):
            a = i * n_minor + j
            b = ((i + 1) % n_major) * n_minor + j
            c = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
            d = i * n_minor + (j + 1) % n_minor
            faces += [(a, b, c), (a, c, d)]
    return TriangleMesh(v, np.array(faces))


def cylinder(radius=0.5, length=2.0, n_around=24, n_along=12, capped=True):
    """Cylinder along the x axis; caps are triangle fans around a center vertex."""
    t = np.linspace(0, 2 * np.pi, n_around, endpoint=False)
    xs = np.linspace(-length / 2, length / 2, n_along + 1)
    X, T = np.meshgrid(xs, t, indexing="ij")
    v = np.stack([X.ravel(), radius * np.cos(T).ravel(), radius * np.sin(T).ravel()], axis=1)
    faces = []
    for i in range(n_along):
        for j in range(n_around):
            a = i * n_around + j
            b = (i + 1) * n_around + j
            c = (i + 1) * n_around + (j + 1) % n_around
            d = i * n_around + (j + 1) % n_around
            faces += [(a, c, b), (a, d, c)]
    if capped:
        c0 = len(v)
        c1 = c0 + 1
        v = np.concatenate([v, [[-length / 2, 0, 0], [length / 2, 0, 0]]])
        last = n_along * n_around
        for j in range(n_around):
            faces.append((c0, (j + 1) % n_around, j))
            faces.append((c1, last + j, last + (j + 1) % n_around))
    return TriangleMesh(v, np.array(faces))


def box(size=(2.0, 1.0, 1.0), n=6):
    """Closed box with each face split into an ``n x n`` grid (shared seams welded)."""
    size = np.asarray(size, dtype=np.float64)
    verts = {}
    pts = []
    faces = []

    def vid(p):
        key = tuple(np.round(p, 9))
        if key not in verts:
            verts[key] = len(pts)
            pts.append(p)
        return verts[key]

    s = np.linspace(-0.5, 0.5, n + 1)
    for axis in range(3):
        for sign in (-1.0, 1.0):
            u_ax, v_ax = [a for a in range(3) if a != axis]
            ids = np.empty((n + 1, n + 1), dtype=np.int64)
            for i, su in enumerate(s):
                for j, sv in enumerate(s):
                    p = np.zeros(3)
                    p[axis] = 0.5 * sign
                    p[u_ax], p[v_ax] = su, sv
                    ids[i, j] = vid(p * size)
            for i in range(n):
                for j in range(n):
                    a, b, c, d = ids[i, j], ids[i + 1, j], ids[i + 1, j + 1], ids[i, j + 1]
                    tri = [(a, b, c), (a, c, d)]
                    # orient outward: (u, v, axis) right-handed iff axis order is cyclic
                    cyclic = (u_ax - axis) % 3 == 1
                    if (sign > 0) != cyclic:
                        tri = [t[::-1] for t in tri]
                    faces += tri
    return TriangleMesh(np.array(pts), np.array(faces))


def ellipsoid(axes=(1.0, 0.6, 0.4), level=3):
    m = icosphere(level)
    return TriangleMesh(m.positions * np.asarray(axes), m.faces)


def bumpy_sphere(level=3, amplitude=0.15, frequency=3, seed=0):
    """Icosphere with a smooth random radial displacement."""
    rng = np.random.default_rng(seed)
    m = icosphere(level)
    p = m.positions
    dirs = rng.normal(size=(frequency, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    phase = rng.uniform(0, 2 * np.pi, size=frequency)
    r = 1.0 + amplitude * np.sin(frequency * p @ dirs.T + phase).mean(axis=1)
    return TriangleMesh(p * r[:, None], m.faces)


def bent_strip(nx=40, ny=6, length=4.0, width=0.6, bend=1.0):
    """Flat strip ``[0, length] x [0, width]`` rolled around the y axis.

    ``bend`` is the total turning angle divided by pi (0 = flat, 1 = U shape).
    The map is an isometry of the smooth strip, so intrinsic distances are kept
    up to chord effects of the triangulation.
    """
    flat = grid(nx, ny, length, width)
    if bend == 0:
        return flat
    x, y = flat.positions[:, 0], flat.positions[:, 1]
    radius = length / (bend * np.pi)
    theta = x / radius
    v = np.stack([radius * np.sin(theta), y, radius * (1.0 - np.cos(theta))], axis=1)
    return TriangleMesh(v, flat.faces)


def two_sided_plate(n=8, size=1.0, thickness=0.0):
    """Two square sheets stacked along z with opposite orientations.

    With ``thickness=0`` the sheets share positions but have normals (0,0,1)
    and (0,0,-1); they are not connected.
    """
    top = grid(n, n, size, size)
    bottom_pos = top.positions.copy()
    bottom_pos[:, 2] -= thickness
    bottom = TriangleMesh(bottom_pos, top.faces[:, ::-1])
    return concatenate([top, bottom])


def concatenate(meshes):
    """Disjoint union of meshes (no welding)."""
    pos, faces, normals = [], [], []
    off = 0
    for m in meshes:
        pos.append(m.positions)
        faces.append(m.faces + off)
        normals.append(m.normals)
        off += m.num_vertices
    return TriangleMesh(np.concatenate(pos), np.concatenate(faces), np.concatenate(normals))


def transformed(mesh, rotation=None, translation=None, scale=1.0):
    pos = mesh.positions * scale
    if rotation is not None:
        pos = pos @ np.asarray(rotation).T
    if translation is not None:
        pos = pos + np.asarray(translation)
    return TriangleMesh(pos, mesh.faces)


def random_rotation(seed=0):
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


CORPUS_FAMILIES = ("ellipsoid", "bumpy_sphere", "torus", "cylinder", "box")


def random_corpus(count=10, seed=0):
    """Randomly proportioned, randomly rotated closed shapes, cycling through
    :data:`CORPUS_FAMILIES`; each mesh is normalized to the [-1, 1] box."""
    rng = np.random.default_rng(seed)
    meshes = []
    for k in range(count):
        fam = CORPUS_FAMILIES[k % len(CORPUS_FAMILIES)]
        if fam == "ellipsoid":
            m = ellipsoid(tuple(rng.uniform(0.4, 1.0, 3)), level=3)
        elif fam == "bumpy_sphere":
            m = bumpy_sphere(3, rng.uniform(0.08, 0.2), int(rng.integers(2, 5)), seed=int(rng.integers(1e6)))
        elif fam == "torus":
            m = torus(1.0, rng.uniform(0.25, 0.5), 32, 12)
        elif fam == "cylinder":
            m = cylinder(rng.uniform(0.3, 0.6), rng.uniform(1.5, 2.5), 24, 12)
        else:
            m = box(tuple(rng.uniform(0.5, 2.0, 3)), 8)
        meshes.append(normalize_mesh(transformed(m, random_rotation(int(rng.integers(1e6))))))
    return meshes
