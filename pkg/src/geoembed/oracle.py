"""Ground-truth distances: graph Dijkstra, Steiner-refined Dijkstra and biharmonic.

Every oracle exposes ``fields(sources) -> (len(sources), V)``. Plain callables
``f(source) -> (V,)`` are accepted wherever an oracle is expected.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import ArpackError, eigsh

from .errors import ChecksumMismatchError, MeshFormatError, NumericError
from .mesh import TriangleMesh, VertexGraph, build_graph

logger = logging.getLogger(__name__)

# Rows of a distance block kept in memory at once (float64 entries).
_BLOCK_ENTRIES = 2 ** 24


def _symmetric_length_graph(n, i, j, positions):
    """Upper-triangular sparse graph with Euclidean weights, duplicates removed."""
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    keep = lo != hi
    lo, hi = lo[keep], hi[keep]
    key = np.unique(lo * n + hi)
    lo, hi = key // n, key % n
    w = np.linalg.norm(positions[lo] - positions[hi], axis=1)
    return sparse.csr_matrix((w, (lo, hi)), shape=(n, n))


def _run_dijkstra(adj, sources, num_out):
    sources = np.atleast_1d(np.asarray(sources, dtype=np.int64))
    rows = max(1, _BLOCK_ENTRIES // max(adj.shape[0], 1))
    out = np.empty((len(sources), num_out))
    for s in range(0, len(sources), rows):
        block = csgraph.dijkstra(adj, directed=False, indices=sources[s:s + rows])
        out[s:s + rows] = block[:, :num_out]
    return out


class DijkstraOracle:
    """Shortest paths along graph edges weighted by Euclidean length."""

    def __init__(self, graph: VertexGraph):
        if isinstance(graph, TriangleMesh):
            graph = build_graph(graph)
        self.num_vertices = graph.num_vertices
        e = graph.edges
        self.adjacency = _symmetric_length_graph(graph.num_vertices, e[:, 0], e[:, 1], graph.positions)

    def fields(self, sources):
        return _run_dijkstra(self.adjacency, sources, self.num_vertices)

    def __call__(self, source):
        return self.fields([source])[0]


def dijkstra_distances(graph: VertexGraph, source: int) -> np.ndarray:
    """Graph distances from ``source``; unreachable vertices are ``inf``."""
    return DijkstraOracle(graph)(source)


class SteinerOracle:
    """Dijkstra on a graph refined with ``points_per_edge`` Steiner points per edge.

    Inside each triangle every pair of points lying on different edges is
    connected, and consecutive points along each edge are chained. Graph paths
    stay on the surface, so distances are upper bounds of the polyhedral
    geodesic distance. ``points_per_edge=0`` is plain edge Dijkstra.
    """

    def __init__(self, mesh: TriangleMesh, points_per_edge: int = 3):
        k = int(points_per_edge)
        if k < 0:
            raise ValueError("points_per_edge must be >= 0")
        self.points_per_edge = k
        self.num_vertices = V = mesh.num_vertices
        faces = mesh.faces
        sides = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
        sorted_sides = np.sort(sides, axis=1)
        edges, inv = np.unique(sorted_sides, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        E = len(edges)
        t = (np.arange(1, k + 1) / (k + 1))[None, :, None]
        a, b = mesh.positions[edges[:, 0]], mesh.positions[edges[:, 1]]
        steiner = (a[:, None, :] * (1.0 - t) + b[:, None, :] * t).reshape(-1, 3)
        self.positions = np.concatenate([mesh.positions, steiner])
        n = len(self.positions)
        # node ids along every edge, endpoint to endpoint: (E, k + 2)
        chain = np.empty((E, k + 2), dtype=np.int64)
        chain[:, 0] = edges[:, 0]
        chain[:, -1] = edges[:, 1]
        chain[:, 1:-1] = V + np.arange(E * k).reshape(E, k)
        ii = [chain[:, :-1].ravel()]
        jj = [chain[:, 1:].ravel()]
        F = len(faces)
        side_chain = chain[inv].reshape(3, F, k + 2)
        for s0, s1 in ((0, 1), (1, 2), (2, 0)):
            p = side_chain[s0][:, :, None]
            q = side_chain[s1][:, None, :]
            p, q = np.broadcast_arrays(p, q)
            ii.append(p.ravel())
            jj.append(q.ravel())
        self.adjacency = _symmetric_length_graph(n, np.concatenate(ii), np.concatenate(jj), self.positions)

    @property
    def num_nodes(self):
        return self.adjacency.shape[0]

    def fields(self, sources):
        return _run_dijkstra(self.adjacency, sources, self.num_vertices)

    def __call__(self, source):
        return self.fields([source])[0]


class EuclideanOracle:
    """Straight-line distances between vertices (an extrinsic baseline, not geodesic)."""

    def __init__(self, mesh: TriangleMesh):
        self.positions = mesh.positions
        self.num_vertices = mesh.num_vertices

    def fields(self, sources):
        sources = np.atleast_1d(np.asarray(sources, dtype=np.int64))
        diff = self.positions[None, :, :] - self.positions[sources][:, None, :]
        return np.linalg.norm(diff, axis=2)

    def __call__(self, source):
        return self.fields([source])[0]


def steiner_refined_distances(mesh: TriangleMesh, source: int, points_per_edge: int = 3) -> np.ndarray:
    return SteinerOracle(mesh, points_per_edge)(source)


def compute_fields(oracle, sources) -> np.ndarray:
    """Distance fields for several sources from any oracle-like object."""
    sources = np.atleast_1d(np.asarray(sources, dtype=np.int64))
    if hasattr(oracle, "fields"):
        return np.asarray(oracle.fields(sources), dtype=np.float64)
    return np.stack([np.asarray(oracle(int(s)), dtype=np.float64) for s in sources])


# --------------------------------------------------------------------------
# Sample sets
# --------------------------------------------------------------------------

GSET_MAGIC = b"GSET"
GSET_VERSION = 1
_GSET_RECORD = np.dtype([("i", "<u4"), ("j", "<u4"), ("d", "<f4")])


@dataclass(eq=False)
class GeodesicSampleSet:
    """Vertex pairs with ground-truth distances, bound to a mesh checksum.

    Distances are stored as float32, the on-disk precision.
    """

    i: np.ndarray
    j: np.ndarray
    d: np.ndarray
    mesh_checksum: int
    dropped_unreachable: int = 0
    dropped_duplicates: int = 0
    _lookup: dict = field(default=None, repr=False)

    def __post_init__(self):
        self.i = np.asarray(self.i, dtype=np.int64)
        self.j = np.asarray(self.j, dtype=np.int64)
        self.d = np.asarray(self.d, dtype=np.float32)
        if not (len(self.i) == len(self.j) == len(self.d)):
            raise ValueError("pair arrays must have equal length")
        if np.any(self.i == self.j):
            raise ValueError("sample pairs must join distinct vertices")

    def __len__(self):
        return len(self.d)

    @property
    def dropped(self):
        return self.dropped_unreachable + self.dropped_duplicates

    def distance(self, i, j) -> float:
        """Stored distance for the unordered pair ``{i, j}``."""
        if self._lookup is None:
            lo, hi = np.minimum(self.i, self.j), np.maximum(self.i, self.j)
            self._lookup = dict(zip(zip(lo.tolist(), hi.tolist()), self.d.tolist()))
        return self._lookup[(min(i, j), max(i, j))]

    def check_mesh(self, mesh: TriangleMesh):
        if mesh.checksum != self.mesh_checksum:
            raise ChecksumMismatchError(
                f"sample set bound to mesh {self.mesh_checksum:016x}, got {mesh.checksum:016x}")

    def to_bytes(self) -> bytes:
        rec = np.empty(len(self), dtype=_GSET_RECORD)
        rec["i"], rec["j"], rec["d"] = self.i, self.j, self.d
        head = GSET_MAGIC + struct.pack("<IQQ", GSET_VERSION, self.mesh_checksum, len(self))
        return head + rec.tobytes()

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes, path=None):
        if len(data) < 24 or data[:4] != GSET_MAGIC:
            raise MeshFormatError("not a GSET file (bad magic)", path)
        version, checksum, count = struct.unpack("<IQQ", data[4:24])
        if version != GSET_VERSION:
            raise MeshFormatError(f"unsupported GSET version {version}", path)
        if len(data) != 24 + count * _GSET_RECORD.itemsize:
            raise MeshFormatError("GSET size does not match pair count", path)
        rec = np.frombuffer(data, dtype=_GSET_RECORD, offset=24, count=count)
        return cls(rec["i"], rec["j"], rec["d"], checksum)

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes(), path)


def sample_pairs(mesh: TriangleMesh, num_sources: int, dests_per_source: int, oracle,
                 seed=0) -> GeodesicSampleSet:
    """Source-grouped random pairs labelled by ``oracle``.

    ``num_sources`` sources are drawn without replacement; each gets
    ``dests_per_source`` distinct destinations. Unordered duplicates are
    stored once; unreachable pairs are dropped and counted.
    """
    V = mesh.num_vertices
    if V < 2:
        raise ValueError("need at least two vertices to sample pairs")
    if not 1 <= num_sources <= V:
        raise ValueError(f"num_sources must be in [1, {V}]")
    if not 1 <= dests_per_source <= V - 1:
        raise ValueError(f"dests_per_source must be in [1, {V - 1}]")
    rng = np.random.default_rng(seed)
    sources = rng.choice(V, size=num_sources, replace=False)
    dests = np.empty((num_sources, dests_per_source), dtype=np.int64)
    for r, s in enumerate(sources):
        t = rng.choice(V - 1, size=dests_per_source, replace=False)
        dests[r] = t + (t >= s)
    fields = compute_fields(oracle, sources)
    d = np.take_along_axis(fields, dests, axis=1).ravel()
    i = np.repeat(sources, dests_per_source)
    j = dests.ravel()

    lo, hi = np.minimum(i, j), np.maximum(i, j)
    _, first = np.unique(lo * V + hi, return_index=True)
    keep = np.zeros(len(i), dtype=bool)
    keep[first] = True
    n_dup = int(len(i) - keep.sum())
    reachable = np.isfinite(d)
    n_unreach = int(np.sum(keep & ~reachable))
    keep &= reachable
    if n_unreach:
        logger.info("sample_pairs: dropped %d unreachable pair(s)", n_unreach)
    return GeodesicSampleSet(i[keep], j[keep], d[keep], mesh.checksum,
                             dropped_unreachable=n_unreach, dropped_duplicates=n_dup)


# --------------------------------------------------------------------------
# Spectral basis and biharmonic distance
# --------------------------------------------------------------------------

COT_CLAMP = (1e-6, 1e6)


def cotangent_laplacian(mesh: TriangleMesh):
    """Cotangent stiffness matrix (positive semidefinite) and lumped mass diagonal.

    Edge weights ``(cot a + cot b) / 2`` are clamped to ``COT_CLAMP``.
    """
    V = mesh.num_vertices
    p = mesh.positions[mesh.faces]
    ii, jj, ww = [], [], []
    for k in range(3):
        a, b = (k + 1) % 3, (k + 2) % 3
        u = p[:, a] - p[:, k]
        v = p[:, b] - p[:, k]
        cross = np.linalg.norm(np.cross(u, v), axis=1)
        cot = np.einsum("ij,ij->i", u, v) / np.maximum(cross, 1e-300)
        ii.append(mesh.faces[:, a])
        jj.append(mesh.faces[:, b])
        ww.append(0.5 * cot)
    ii, jj, ww = np.concatenate(ii), np.concatenate(jj), np.concatenate(ww)
    lo, hi = np.minimum(ii, jj), np.maximum(ii, jj)
    W = sparse.coo_matrix((ww, (lo, hi)), shape=(V, V)).tocsr()
    W.sum_duplicates()
    W.data = np.clip(W.data, *COT_CLAMP)
    W = W + W.T
    L = sparse.diags(np.asarray(W.sum(axis=1)).ravel()) - W
    area = mesh.face_areas()
    mass = np.zeros(V)
    for k in range(3):
        np.add.at(mass, mesh.faces[:, k], area / 3.0)
    floor = 1e-12 * max(mass.mean(), 1e-300)
    mass = np.maximum(mass, floor)
    return L.tocsr(), mass


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    """Smallest non-constant Laplace eigenpairs (ascending), mass-orthonormal."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    mass: np.ndarray
    mesh_checksum: int

    @property
    def num_modes(self):
        return len(self.eigenvalues)

    def orthonormality_error(self) -> float:
        phi = self.eigenvectors
        gram = phi.T @ (self.mass[:, None] * phi)
        return float(np.abs(gram - np.eye(len(gram))).max())

    def scaled_coordinates(self, num_modes=None) -> np.ndarray:
        """Rows ``phi_k(x) / lambda_k``; biharmonic distance is their Euclidean distance."""
        m = self.num_modes if num_modes is None else num_modes
        return self.eigenvectors[:, :m] / self.eigenvalues[:m]


DENSE_LIMIT = 3000


def build_spectral_basis(mesh: TriangleMesh, num_modes: int) -> SpectralBasis:
    """Generalized eigenpairs of (cotangent stiffness, lumped mass).

    The constant modes (one per connected component) are dropped and the next
    ``num_modes`` pairs returned.
    """
    V = mesh.num_vertices
    L, mass = cotangent_laplacian(mesh)
    n_comp, _ = csgraph.connected_components(L, directed=False)
    want = num_modes + n_comp
    if num_modes < 1 or want > V:
        raise ValueError(f"num_modes must be in [1, {V - n_comp}]")
    try:
        if V <= DENSE_LIMIT or want >= V - 1:
            vals, vecs = scipy.linalg.eigh(L.toarray(), np.diag(mass), subset_by_index=[0, want - 1])
        else:
            scale = float(L.diagonal().mean() / mass.mean())
            vals, vecs = eigsh(L, k=want, M=sparse.diags(mass), sigma=-1e-3 * scale, which="LM")
            order = np.argsort(vals)
            vals, vecs = vals[order], vecs[:, order]
    except (np.linalg.LinAlgError, ArpackError, ValueError) as exc:
        cond = float(mass.max() / mass.min())
        raise NumericError(f"eigensolver failed ({exc}); mass condition {cond:.3e}",
                           stage="spectral_basis") from exc
    vals, vecs = vals[n_comp:], vecs[:, n_comp:]
    if not np.all(np.isfinite(vals)) or vals[0] <= 1e-9:
        raise NumericError(f"non-positive retained eigenvalue {vals[0]:.3e}", stage="spectral_basis")
    # re-orthonormalize against the mass inner product (cheap, m x m)
    gram = vecs.T @ (mass[:, None] * vecs)
    c = np.linalg.cholesky(gram)
    vecs = scipy.linalg.solve_triangular(c, vecs.T, lower=True).T
    return SpectralBasis(vals, vecs, mass, mesh.checksum)


class BiharmonicOracle:
    """Truncated-spectrum biharmonic distance fields."""

    def __init__(self, mesh: TriangleMesh, basis: SpectralBasis):
        if basis.mesh_checksum != mesh.checksum:
            raise ChecksumMismatchError("spectral basis was built for a different mesh")
        self.num_vertices = mesh.num_vertices
        self.coords = basis.scaled_coordinates()

    def fields(self, sources):
        sources = np.atleast_1d(np.asarray(sources, dtype=np.int64))
        out = np.empty((len(sources), self.num_vertices))
        for r, s in enumerate(sources):
            diff = self.coords - self.coords[s]
            out[r] = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        return out

    def __call__(self, source):
        return self.fields([source])[0]


def biharmonic_distances(mesh: TriangleMesh, source: int, basis: SpectralBasis) -> np.ndarray:
    return BiharmonicOracle(mesh, basis)(source)
