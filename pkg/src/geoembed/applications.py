"""Uses of fast distance queries: geodesic path tracing and shape distributions."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import PartialPathError
from .mesh import TriangleMesh

_TOL = 1e-9


# --------------------------------------------------------------------------
# Path tracing
# --------------------------------------------------------------------------

@dataclass(eq=False)
class GeodesicPath:
    """Polyline on the surface, from the target vertex to the source vertex.

    ``faces[k]`` is a triangle holding both ``points[k]`` and ``points[k + 1]``
    (the last entry repeats the final triangle).
    """

    points: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1)
        if len(self.points) != len(self.faces):
            raise ValueError("one face tag per point required")

    def __len__(self):
        return len(self.points)

    @property
    def total_length(self) -> float:
        if len(self.points) < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())

    def save_obj(self, path):
        """Polyline OBJ: one ``v`` per point and a single ``l`` element."""
        lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in self.points]
        if len(self.points) > 1:
            lines.append("l " + " ".join(str(k + 1) for k in range(len(self.points))))
        Path(path).write_text("\n".join(lines) + "\n")


def face_gradients(positions, faces, values) -> np.ndarray:
    """Gradient of the piecewise-linear interpolant of ``values`` on every face."""
    p0, p1, p2 = (positions[faces[:, k]] for k in range(3))
    n = np.cross(p1 - p0, p2 - p0)
    area2 = np.linalg.norm(n, axis=1, keepdims=True)
    nh = n / np.where(area2 > 0, area2, 1.0)
    v = values[faces]
    g = (v[:, :1] * np.cross(nh, p2 - p1) + v[:, 1:2] * np.cross(nh, p0 - p2)
         + v[:, 2:] * np.cross(nh, p1 - p0))
    return g / np.where(area2 > 0, area2, np.inf)


class _Topology:
    def __init__(self, mesh: TriangleMesh):
        self.faces = mesh.faces
        self.positions = mesh.positions
        self.edge_faces = defaultdict(list)
        self.vertex_faces = defaultdict(list)
        for f, tri in enumerate(self.faces.tolist()):
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                self.edge_faces[(min(a, b), max(a, b))].append(f)
            for a in tri:
                self.vertex_faces[a].append(f)
        self.neighbors = defaultdict(set)
        for a, b in self.edge_faces:
            self.neighbors[a].add(b)
            self.neighbors[b].add(a)

    def barycentric_rate(self, f, u):
        """Change of barycentric coordinates per unit step along in-plane ``u``."""
        P = self.positions[self.faces[f]]
        M = np.vstack([P.T, np.ones(3)])
        rhs = np.append(u, 0.0)
        return np.linalg.lstsq(M, rhs, rcond=None)[0]


def _exit(top, f, lam, u):
    """Walk from barycentric ``lam`` along ``u`` to the boundary of face ``f``."""
    rate = top.barycentric_rate(f, u)
    t = np.inf
    for k in range(3):
        if rate[k] < -_TOL:
            t = min(t, max(lam[k], 0.0) / -rate[k])
    if not np.isfinite(t) or t <= 0:
        return None
    new = lam + t * rate
    new[np.abs(new) < 1e-9] = 0.0
    new = np.clip(new, 0.0, None)
    return new / new.sum()


def trace_geodesic_path(mesh: TriangleMesh, session, source: int, target: int, max_steps=10_000) -> GeodesicPath:
    """Follow the negative gradient of ``d(source, .)`` from ``target`` to ``source``.

    The field comes from ``session.distances_from(source)`` and is linearly
    interpolated inside each triangle. From a vertex the walk enters the
    incident triangle whose descent direction lies in its corner (smallest
    index wins); on an edge it continues in the adjacent triangle whose
    descent points inward. If no triangle qualifies it steps along the
    edge to the lower neighbouring vertex. The walk ends inside a triangle
    touching ``source``, where the source point is appended.

    Raises :class:`PartialPathError` with the points traced so far when
    ``max_steps`` triangle steps are used up or the field has a local
    minimum away from the source.
    """
    V = mesh.num_vertices
    if not (0 <= source < V and 0 <= target < V):
        raise IndexError("vertex index outside the mesh")
    if source == target:
        raise ValueError("source and target must differ")
    points, tags = [], []

    def partial(msg):
        return PartialPathError(msg, GeodesicPath(points, tags))

    if max_steps <= 0:
        raise partial("step limit reached before leaving the target")
    d = np.asarray(session.distances_from(source), dtype=np.float64)
    top = _Topology(mesh)
    faces = top.faces
    pos = top.positions
    grad = face_gradients(pos, faces, d)

    def point_of(f, lam):
        return lam @ pos[faces[f]]

    def finish(f):
        points.append(pos[source])
        tags.append(f)
        tags[-2] = f
        return GeodesicPath(points, tags)

    # state: ("v", vertex) or ("e", face_we_came_from, barycentric in that face)
    state = ("v", int(target))
    points.append(pos[target])
    tags.append(top.vertex_faces[target][0] if top.vertex_faces[target] else -1)
    seen = set()
    for _ in range(max_steps):
        if state[0] == "v":
            v = state[1]
            key = ("v", v)
            if key in seen:
                raise partial(f"walk revisited vertex {v}")
            seen.add(key)
            incident = sorted(top.vertex_faces[v])
            for f in incident:
                if source in faces[f]:
                    return finish(f)
            chosen = None
            for f in incident:
                u = -grad[f]
                if not np.any(u):
                    continue
                lam = (faces[f] == v).astype(np.float64)
                rate = top.barycentric_rate(f, u)
                others = [k for k in range(3) if faces[f][k] != v]
                if rate[others[0]] >= -_TOL and rate[others[1]] >= -_TOL and rate[faces[f] == v][0] < -_TOL:
                    chosen = (f, lam, u)
                    break
            if chosen is None:
                state = _edge_step(top, d, v, points, tags, partial)
                continue
            f, lam, u = chosen
        else:
            _, f_prev, lam_prev = state
            tri = faces[f_prev]
            on_edge = [k for k in range(3) if lam_prev[k] > 0]
            a, b = int(tri[on_edge[0]]), int(tri[on_edge[1]])
            chosen = None
            for f in sorted(top.edge_faces[(min(a, b), max(a, b))]):
                c = [k for k in range(3) if faces[f][k] not in (a, b)][0]
                u = -grad[f]
                if top.barycentric_rate(f, u)[c] > _TOL:
                    lam = np.zeros(3)
                    for k in range(3):
                        if faces[f][k] != faces[f][c]:
                            lam[k] = lam_prev[list(tri).index(faces[f][k])]
                    chosen = (f, lam, u)
                    break
            if chosen is None:
                # valley along the edge: slide to its lower endpoint
                w = min((a, b), key=lambda k: (d[k], k))
                f_any = sorted(top.edge_faces[(min(a, b), max(a, b))])[0]
                tags[-1] = f_any
                points.append(pos[w])
                tags.append(f_any)
                state = ("v", w)
                continue
            f, lam, u = chosen
        if source in faces[f]:
            tags[-1] = f
            return finish(f)
        new = _exit(top, f, lam, u)
        if new is None:
            raise partial("descent direction leaves the triangle immediately")
        tags[-1] = f
        points.append(point_of(f, new))
        tags.append(f)
        nz = np.flatnonzero(new > 0)
        if len(nz) == 1:
            state = ("v", int(faces[f][nz[0]]))
        else:
            state = ("e", f, new)
    raise partial(f"no arrival within {max_steps} steps")


def _edge_step(top, d, v, points, tags, partial):
    lower = [w for w in top.neighbors[v] if d[w] < d[v]]
    if not lower:
        raise partial(f"distance field has a local minimum at vertex {v}")
    w = min(lower, key=lambda k: (d[k], k))
    f = sorted(top.edge_faces[(min(v, w), max(v, w))])[0]
    tags[-1] = f
    points.append(top.positions[w])
    tags.append(f)
    return ("v", w)


def path_point_in_face(mesh: TriangleMesh, point, face, tol=1e-7) -> bool:
    """True if ``point`` lies in triangle ``face`` (up to ``tol``)."""
    P = mesh.positions[mesh.faces[face]]
    M = np.vstack([P.T, np.ones(3)])
    lam, *_ = np.linalg.lstsq(M, np.append(point, 1.0), rcond=None)
    return bool(np.all(lam >= -tol) and np.linalg.norm(lam @ P - point) <= tol * (1 + np.abs(point).max()))


# --------------------------------------------------------------------------
# Shape distributions
# --------------------------------------------------------------------------

@dataclass(eq=False)
class ShapeDistribution:
    bin_edges: np.ndarray
    counts: np.ndarray
    normalization: int

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if len(self.bin_edges) != len(self.counts) + 1:
            raise ValueError("need one more bin edge than counts")
        if np.any(np.diff(self.bin_edges) <= 0):
            raise ValueError("bin edges must be strictly ascending")
        if np.any(self.counts < 0) or int(self.counts.sum()) != self.normalization:
            raise ValueError("counts must be nonnegative and sum to the normalization")

    @property
    def bins(self):
        return len(self.counts)

    @property
    def centers(self):
        return 0.5 * (self.bin_edges[1:] + self.bin_edges[:-1])

    def normalized(self) -> np.ndarray:
        if self.normalization == 0:
            raise ValueError("empty distribution")
        return self.counts / self.normalization

    def save_text(self, path):
        """Two columns: bin center and normalized count."""
        data = np.column_stack([self.centers, self.normalized()])
        np.savetxt(path, data, fmt="%.9g", header="bin_center normalized_count")


def _pairs(V, num_pairs, rng):
    total = V * (V - 1) // 2
    if num_pairs >= total:
        i, j = np.triu_indices(V, k=1)
        return i, j
    i = rng.integers(0, V, size=num_pairs)
    j = rng.integers(0, V - 1, size=num_pairs)
    j = j + (j >= i)
    return i, j


def shape_distribution(mesh: TriangleMesh, session, num_pairs=100_000, bins=64, seed=0) -> ShapeDistribution:
    """Histogram of distances between random vertex pairs on ``[0, max]``.

    Pairs join distinct vertices. When ``num_pairs`` covers every unordered
    pair, all pairs are enumerated once instead of sampled.
    """
    if num_pairs < 1 or bins < 1:
        raise ValueError("num_pairs and bins must be positive")
    V = mesh.num_vertices
    if V < 2:
        raise ValueError("need at least two vertices")
    i, j = _pairs(V, num_pairs, np.random.default_rng(seed))
    dist = np.asarray(session.query_pairs(i, j), dtype=np.float64)
    dist = dist[np.isfinite(dist)]
    top = float(dist.max()) if len(dist) else 0.0
    counts, edges = np.histogram(dist, bins=bins, range=(0.0, top if top > 0 else 1.0))
    return ShapeDistribution(edges, counts, int(counts.sum()))


def compare_distributions(a: ShapeDistribution, b: ShapeDistribution) -> float:
    """L1 distance between the two normalized histograms, in ``[0, 2]``.

    Both histograms are read as piecewise-constant densities and compared on
    the union of their bin edges, so histograms with different ranges are
    re-binned exactly. Zero iff the densities coincide; a metric.
    """
    if a.normalization == 0 or b.normalization == 0:
        raise ValueError("empty distribution")
    edges = np.union1d(a.bin_edges, b.bin_edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    width = np.diff(edges)

    def density(h):
        dens = h.normalized() / np.diff(h.bin_edges)
        k = np.searchsorted(h.bin_edges, mid, side="right") - 1
        inside = (k >= 0) & (k < h.bins)
        out = np.zeros(len(mid))
        out[inside] = dens[k[inside]]
        return out

    return float(np.clip(np.sum(np.abs(density(a) - density(b)) * width), 0.0, 2.0))
