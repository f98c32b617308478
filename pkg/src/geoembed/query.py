"""Precompute once, query many: embedding sessions, MRE evaluation and timing."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import ChecksumMismatchError, ShapeError
from .mesh import TriangleMesh, save_ply
from .network import DistanceMLP, EmbeddingTable, GeodesicEmbeddingNet, unet_forward
from .oracle import compute_fields
from .training import mre_loss

TRIANGLE_SLACK = 1e-6


def _check_normalized(mesh: TriangleMesh, tol=1e-9):
    if mesh.num_vertices and np.abs(mesh.positions).max() > 1.0 + tol:
        raise ValueError("mesh must be normalized to the [-1, 1] box first (see normalize_mesh)")


def precompute_embedding(model: GeodesicEmbeddingNet, mesh: TriangleMesh, path=None) -> EmbeddingTable:
    """One U-Net forward pass over a normalized mesh; optionally persisted as GEMB."""
    _check_normalized(mesh)
    table = unet_forward(mesh, model)
    if path is not None:
        table.save(path)
    return table


class QuerySession:
    """Immutable embedding table plus decoder, bound to one mesh.

    Every query costs one decoder evaluation, independent of the mesh size.
    Instances hold no mutable state, so concurrent queries are safe.
    """

    def __init__(self, table: EmbeddingTable, decoder, mesh_checksum: int, precompute_seconds=None):
        if table.mesh_checksum != mesh_checksum:
            raise ChecksumMismatchError(
                f"embedding table bound to mesh {table.mesh_checksum:016x}, session mesh {mesh_checksum:016x}")
        if isinstance(decoder, GeodesicEmbeddingNet):
            decoder = decoder.decoder
        if isinstance(decoder, DistanceMLP):
            first = decoder.layers[0]
            if first.in_features != table.channels:
                raise ShapeError(f"decoder expects {first.in_features} channels, table has {table.channels}")
        self.table = table
        self.decoder = decoder.eval() if hasattr(decoder, "eval") else decoder
        self.mesh_checksum = mesh_checksum
        self.precompute_seconds = precompute_seconds
        self._vectors = torch.from_numpy(table.vectors)
        self._vectors.requires_grad_(False)

    @property
    def num_vertices(self):
        return self.table.num_vertices

    def _decode(self, i, j):
        with torch.inference_mode():
            out = self.decoder(self._vectors[i], self._vectors[j]).clamp(min=0.0)
        return out.numpy().astype(np.float64)

    def _indices(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.num_vertices):
            raise IndexError(f"vertex index outside [0, {self.num_vertices})")
        return torch.from_numpy(idx)

    def query(self, i: int, j: int) -> float:
        """Distance between vertices ``i`` and ``j``."""
        ii = self._indices([i])
        jj = self._indices([j])
        return float(self._decode(ii, jj)[0])

    def query_pairs(self, i, j) -> np.ndarray:
        i, j = self._indices(i).reshape(-1), self._indices(j).reshape(-1)
        if len(i) != len(j):
            raise ShapeError("index arrays differ in length")
        if len(i) == 0:
            return np.zeros(0)
        return self._decode(i, j)

    def query_batch(self, pairs) -> np.ndarray:
        """Distances for an ``(n, 2)`` array of vertex pairs, in order."""
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        return self.query_pairs(pairs[:, 0], pairs[:, 1])

    def distances_from(self, source: int) -> np.ndarray:
        """Distance field from one vertex to every vertex."""
        src = self._indices([source])
        return self._decode(src.expand(self.num_vertices), torch.arange(self.num_vertices))

    def fields(self, sources) -> np.ndarray:
        return np.stack([self.distances_from(int(s)) for s in np.atleast_1d(sources)])

    def check_mesh(self, mesh: TriangleMesh):
        if mesh.checksum != self.mesh_checksum or mesh.num_vertices != self.num_vertices:
            raise ChecksumMismatchError(
                f"session bound to mesh {self.mesh_checksum:016x}, got {mesh.checksum:016x}")


def open_session(model: GeodesicEmbeddingNet, mesh: TriangleMesh, path=None) -> QuerySession:
    """Precompute the embedding of ``mesh`` and wrap it in a session (timed)."""
    t0 = time.perf_counter()
    table = precompute_embedding(model, mesh, path)
    return QuerySession(table, model, mesh.checksum, time.perf_counter() - t0)


def load_session(table_path, model: GeodesicEmbeddingNet, mesh: TriangleMesh) -> QuerySession:
    """Session from a stored GEMB file; refuses tables computed for another mesh."""
    table = EmbeddingTable.load(table_path)
    table.check_mesh(mesh)
    return QuerySession(table, model, mesh.checksum)


class OracleSession:
    """Session-like view of an exact oracle: same query methods, oracle distances.

    Lets evaluation, path tracing and the triangle test run on ground truth.
    Fields are cached per source.
    """

    def __init__(self, oracle, mesh: TriangleMesh):
        self.oracle = oracle
        self.mesh_checksum = mesh.checksum
        self.num_vertices = mesh.num_vertices
        self._cache = {}

    def distances_from(self, source: int) -> np.ndarray:
        source = int(source)
        if not 0 <= source < self.num_vertices:
            raise IndexError(f"vertex index outside [0, {self.num_vertices})")
        if source not in self._cache:
            self._cache[source] = compute_fields(self.oracle, [source])[0]
        return self._cache[source]

    def fields(self, sources) -> np.ndarray:
        return np.stack([self.distances_from(int(s)) for s in np.atleast_1d(sources)])

    def query(self, i: int, j: int) -> float:
        return float(self.distances_from(i)[j])

    def query_pairs(self, i, j) -> np.ndarray:
        i, j = np.asarray(i, dtype=np.int64).reshape(-1), np.asarray(j, dtype=np.int64).reshape(-1)
        out = np.empty(len(i))
        for s in np.unique(i):
            sel = i == s
            out[sel] = self.distances_from(int(s))[j[sel]]
        return out

    def query_batch(self, pairs) -> np.ndarray:
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        return self.query_pairs(pairs[:, 0], pairs[:, 1])

    def check_mesh(self, mesh: TriangleMesh):
        if mesh.checksum != self.mesh_checksum:
            raise ChecksumMismatchError("oracle session bound to a different mesh")


def evaluate_mre(predictor, mesh: TriangleMesh, oracle, num_sources=500, seed=0, epsilon=1e-3) -> float:
    """MRE over all (source, other vertex) pairs of ``num_sources`` random sources.

    ``predictor`` is a session, an oracle-like object with ``fields``, or a
    trained model (embedded here). Unreachable pairs are skipped.
    """
    V = mesh.num_vertices
    if not 1 <= num_sources <= V:
        raise ValueError(f"num_sources must be in [1, {V}]")
    if isinstance(predictor, GeodesicEmbeddingNet):
        predictor = open_session(predictor, mesh)
    if hasattr(predictor, "check_mesh"):
        predictor.check_mesh(mesh)
    rng = np.random.default_rng(seed)
    sources = np.sort(rng.choice(V, size=num_sources, replace=False))
    gt = compute_fields(oracle, sources)
    pred = compute_fields(predictor, sources)
    keep = np.isfinite(gt)
    keep[np.arange(num_sources), sources] = False
    return mre_loss(pred[keep], gt[keep], epsilon)


# --------------------------------------------------------------------------
# Benchmarks
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BenchmarkReport:
    precompute_seconds: float
    queries_per_second: float
    batch_size: int
    vertex_count: int
    num_queries: int = 0
    repeats: int = 0

    def __post_init__(self):
        for name in ("precompute_seconds", "queries_per_second", "batch_size", "vertex_count"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def seconds_per_query(self):
        return 1.0 / self.queries_per_second

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def time_precompute(model, mesh, repeats=5) -> float:
    """Median wall time of the embedding precomputation (one warm-up run excluded)."""
    precompute_embedding(model, mesh)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        precompute_embedding(model, mesh)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def benchmark(session: QuerySession, batch_sizes: Sequence[int] = (1, 100, 10_000), num_queries=1_000_000,
              repeats=5, seed=0, precompute_seconds: Optional[float] = None):
    """Sustained query throughput at each batch size.

    For every batch size, ``num_queries`` random pairs are answered in chunks
    of that size; one warm-up chunk is excluded and the median of
    ``repeats`` full passes is reported.
    """
    pre = precompute_seconds if precompute_seconds is not None else session.precompute_seconds
    if pre is None:
        raise ValueError("precompute time unknown: open the session with open_session or pass precompute_seconds")
    if num_queries < 1 or repeats < 1:
        raise ValueError("num_queries and repeats must be positive")
    rng = np.random.default_rng(seed)
    V = session.num_vertices
    i = torch.from_numpy(rng.integers(0, V, size=num_queries))
    j = torch.from_numpy(rng.integers(0, V, size=num_queries))
    reports = []
    for b in batch_sizes:
        b = int(b)
        if b < 1:
            raise ValueError("batch sizes must be positive")
        chunks = [(i[s:s + b], j[s:s + b]) for s in range(0, num_queries, b)]
        session._decode(*chunks[0])
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            for ci, cj in chunks:
                session._decode(ci, cj)
            times.append(time.perf_counter() - t0)
        reports.append(BenchmarkReport(pre, num_queries / statistics.median(times), b, V, num_queries, repeats))
    return reports


# --------------------------------------------------------------------------
# Triangle inequality
# --------------------------------------------------------------------------

def triangle_violation_mask(session, p: int, q: int, tau=TRIANGLE_SLACK) -> np.ndarray:
    """Per-vertex mask of ``d(p, q) > d(p, x) + d(q, x) + tau``."""
    dp = session.distances_from(p)
    dq = session.distances_from(q)
    return dp[q] > dp + dq + tau


def triangle_violations(session, p: int, q: int, tau=TRIANGLE_SLACK) -> np.ndarray:
    """Sorted indices of the vertices ``x`` for which the triangle inequality fails."""
    return np.flatnonzero(triangle_violation_mask(session, p, q, tau))


def violation_fraction(session, num_pairs=20, seed=0, tau=TRIANGLE_SLACK) -> float:
    """Mean fraction of violating vertices over random (p, q) pairs."""
    rng = np.random.default_rng(seed)
    V = session.num_vertices
    fr = []
    for _ in range(num_pairs):
        p, q = rng.choice(V, size=2, replace=False)
        fr.append(triangle_violation_mask(session, int(p), int(q), tau).mean())
    return float(np.mean(fr))


def export_field_ply(path, mesh: TriangleMesh, values, binary=True):
    """Write ``mesh`` with one scalar per vertex (distance field or 0/1 mask) as PLY quality."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if len(values) != mesh.num_vertices:
        raise ShapeError("one value per vertex required")
    save_ply(path, mesh, quality=values, binary=binary)
