"""Graph U-Net producing per-vertex geodesic embeddings, and the pair decoders.

Building blocks:

* ``geo_conv``: ``F'_i = W0 F_i + max_j W1 [F_j || v_i - v_j || |v_i - v_j|]``
* ``geo_pool`` / ``geo_unpool``: clustering on a regular grid over
  (position, normal) space, and its inverse through the cached cluster map
* ``ResBlock``: two pre-activated GeoConvs with an identity skip
* ``GeoUNet``: stem, encoder/pool stages, bottleneck, unpool/decoder stages, head
* ``DistanceMLP``: maps the squared embedding difference to a distance
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ChecksumMismatchError, MeshFormatError, NumericError, ShapeError
from .mesh import FALLBACK_NORMAL, TriangleMesh, VertexGraph, build_graph

AGGREGATIONS = ("max", "mean", "sum")


@dataclass
class ModelConfig:
    channels: int = 256
    depth: int = 3
    blocks: int = 1
    sigma_c: float = 1.0 / 16.0
    sigma_n: float = 3.0 / 16.0
    groups: int = 8
    aggr: str = "max"
    decoder: str = "mlp"
    use_dist: bool = True
    use_relpos: bool = True
    in_channels: int = 6

    def __post_init__(self):
        if self.aggr not in AGGREGATIONS:
            raise ValueError(f"aggr must be one of {AGGREGATIONS}")
        if self.decoder not in ("mlp", "euclidean"):
            raise ValueError("decoder must be 'mlp' or 'euclidean'")
        if self.channels % self.groups:
            raise ValueError("channels must be divisible by groups")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# --------------------------------------------------------------------------
# Pooling on (position, normal) grids -- numpy, geometry only
# --------------------------------------------------------------------------

def _cell_keys(positions, normals, sigma_c, sigma_n):
    kc = np.floor(positions / sigma_c).astype(np.int64)
    if math.isinf(sigma_n):
        kn = np.zeros_like(kc)
    else:
        kn = np.floor(normals / sigma_n).astype(np.int64)
    return np.concatenate([kc, kn], axis=1)


def _renormalize(n):
    length = np.linalg.norm(n, axis=1)
    bad = length < 1e-12
    n = n.copy()
    n[bad] = FALLBACK_NORMAL
    length[bad] = 1.0
    return n / length[:, None]


def _segment_mean(values, index, n):
    out = np.zeros((n,) + values.shape[1:])
    np.add.at(out, index, values)
    counts = np.bincount(index, minlength=n).astype(np.float64)
    return out / counts.reshape((-1,) + (1,) * (values.ndim - 1))


def geo_pool(graph: VertexGraph, features=None, sigma_c=1.0 / 16.0, sigma_n=3.0 / 16.0):
    """Merge vertices that share a cell of the 6D (position, normal) grid.

    Returns ``(coarse_graph, coarse_features, cluster_map)``. Coarse positions
    and features are member means; normals are renormalized means. A coarse
    edge exists wherever a fine edge joins two different clusters.
    ``sigma_n = inf`` gives plain 3D grid pooling.
    """
    if not (sigma_c > 0 and sigma_n > 0):
        raise ValueError("grid scales must be positive")
    keys = _cell_keys(graph.positions, graph.normals, sigma_c, sigma_n)
    _, cluster = np.unique(keys, axis=0, return_inverse=True)
    cluster = cluster.reshape(-1).astype(np.int64)
    n = int(cluster.max()) + 1 if len(cluster) else 0
    pos = _segment_mean(graph.positions, cluster, n)
    nrm = _renormalize(_segment_mean(graph.normals, cluster, n))
    ce = cluster[graph.edges]
    ce = np.sort(ce[ce[:, 0] != ce[:, 1]], axis=1)
    ce = np.unique(ce, axis=0) if len(ce) else ce.reshape(0, 2)
    coarse = VertexGraph(pos, nrm, ce)
    coarse_features = None
    if features is not None:
        features = np.asarray(features, dtype=np.float64)
        if len(features) != graph.num_vertices:
            raise ShapeError("feature rows must match graph vertices")
        coarse_features = _segment_mean(features, cluster, n)
    return coarse, coarse_features, cluster


def geo_unpool(coarse_features, cluster_map):
    """Copy every coarse row back to the fine vertices of its cluster."""
    cluster_map = np.asarray(cluster_map) if not torch.is_tensor(cluster_map) else cluster_map
    if len(cluster_map) and int(cluster_map.max()) >= len(coarse_features):
        raise ShapeError("cluster map refers to missing coarse rows")
    return coarse_features[cluster_map]


@dataclass(eq=False)
class GraphHierarchy:
    """Graphs from fine (level 0) to coarse; ``cluster_maps[l]`` maps level l to l+1."""

    levels: List[VertexGraph]
    cluster_maps: List[np.ndarray]

    @property
    def depth(self):
        return len(self.cluster_maps)


def build_hierarchy(graph: VertexGraph, depth=3, sigma_c=1.0 / 16.0, sigma_n=3.0 / 16.0) -> GraphHierarchy:
    """Repeated GeoPool with both grid scales doubling after every pooling."""
    levels, maps = [graph], []
    for _ in range(depth):
        coarse, _, cluster = geo_pool(levels[-1], None, sigma_c, sigma_n)
        levels.append(coarse)
        maps.append(cluster)
        sigma_c, sigma_n = 2.0 * sigma_c, 2.0 * sigma_n
    return GraphHierarchy(levels, maps)


# --------------------------------------------------------------------------
# Torch-side graph batches
# --------------------------------------------------------------------------

def neighbor_table(edge_index, num_nodes):
    """Padded neighbour lists: ``nbr[i, k]`` is the k-th neighbour of i where ``valid[i, k]``."""
    src, dst = edge_index[0], edge_index[1]
    if src.numel() == 0:
        return torch.zeros(num_nodes, 0, dtype=torch.long), torch.zeros(num_nodes, 0, dtype=torch.bool)
    order = torch.argsort(dst * num_nodes + src)
    src, dst = src[order], dst[order]
    deg = torch.bincount(dst, minlength=num_nodes)
    start = torch.cumsum(deg, 0) - deg
    slot = torch.arange(len(dst)) - start[dst]
    K = int(deg.max())
    nbr = torch.zeros(num_nodes, K, dtype=torch.long)
    valid = torch.zeros(num_nodes, K, dtype=torch.bool)
    nbr[dst, slot] = src
    valid[dst, slot] = True
    return nbr, valid


@dataclass(eq=False)
class Level:
    pos: torch.Tensor          # (V, 3)
    edge_index: torch.Tensor   # (2, 2E): row 0 neighbour j, row 1 centre i
    batch: torch.Tensor        # (V,) graph id
    num_graphs: int
    _table: tuple = field(default=None, repr=False)

    @property
    def num_vertices(self):
        return self.pos.shape[0]

    @property
    def neighbors(self):
        if self._table is None:
            self._table = neighbor_table(self.edge_index, self.num_vertices)
        return self._table


@dataclass(eq=False)
class HierarchyBatch:
    """One or more hierarchies stacked as a disjoint union."""

    levels: List[Level]
    cluster_maps: List[torch.Tensor]
    features: torch.Tensor               # (V0, 6) input signal
    offsets: np.ndarray = field(default=None)  # level-0 start row of each graph, plus total

    @property
    def num_graphs(self):
        return self.levels[0].num_graphs

    def to(self, dtype):
        return HierarchyBatch(
            [Level(l.pos.to(dtype), l.edge_index, l.batch, l.num_graphs, l._table) for l in self.levels],
            self.cluster_maps, self.features.to(dtype), self.offsets)


def level_from_graph(graph: VertexGraph, dtype=torch.float32) -> Level:
    ei = torch.from_numpy(graph.directed_edges())
    n = graph.num_vertices
    return Level(torch.tensor(graph.positions, dtype=dtype), ei, torch.zeros(n, dtype=torch.long), 1)


def hierarchy_tensors(h: GraphHierarchy, dtype=torch.float32) -> HierarchyBatch:
    g0 = h.levels[0]
    feats = np.concatenate([g0.positions, g0.normals], axis=1)
    return HierarchyBatch(
        [level_from_graph(g, dtype) for g in h.levels],
        [torch.from_numpy(np.asarray(c, dtype=np.int64)) for c in h.cluster_maps],
        torch.tensor(feats, dtype=dtype),
        np.array([0, g0.num_vertices]),
    )


def collate(batches: List[HierarchyBatch]) -> HierarchyBatch:
    """Disjoint union; pooling was computed per mesh so clusters never mix meshes."""
    if len(batches) == 1:
        return batches[0]
    depth = len(batches[0].cluster_maps)
    levels, maps = [], []
    for l in range(depth + 1):
        pos, ei, bt = [], [], []
        off = 0
        gid = 0
        for b in batches:
            lv = b.levels[l]
            pos.append(lv.pos)
            ei.append(lv.edge_index + off)
            bt.append(lv.batch + gid)
            off += lv.num_vertices
            gid += lv.num_graphs
        levels.append(Level(torch.cat(pos), torch.cat(ei, 1), torch.cat(bt), gid))
    for l in range(depth):
        cm = []
        off = 0
        for b in batches:
            cm.append(b.cluster_maps[l] + off)
            off += b.levels[l + 1].num_vertices
        maps.append(torch.cat(cm))
    sizes = [b.levels[0].num_vertices for b in batches]
    return HierarchyBatch(levels, maps, torch.cat([b.features for b in batches]),
                          np.concatenate([[0], np.cumsum(sizes)]))


def prepare_mesh(mesh_or_graph, config: ModelConfig, dtype=torch.float32) -> HierarchyBatch:
    graph = build_graph(mesh_or_graph) if isinstance(mesh_or_graph, TriangleMesh) else mesh_or_graph
    h = build_hierarchy(graph, config.depth, config.sigma_c, config.sigma_n)
    return hierarchy_tensors(h, dtype)


# --------------------------------------------------------------------------
# Layers
# --------------------------------------------------------------------------

def aggregate(messages, index, num_nodes, aggr="max"):
    """Reduce edge messages onto their target vertex; empty neighbourhoods give 0."""
    out = messages.new_zeros((num_nodes, messages.shape[1]))
    if messages.shape[0] == 0:
        return out
    if aggr == "max":
        idx = index.unsqueeze(1).expand_as(messages)
        return out.scatter_reduce(0, idx, messages, reduce="amax", include_self=False)
    out = out.index_add(0, index, messages)
    if aggr == "mean":
        deg = torch.bincount(index, minlength=num_nodes).clamp(min=1).to(messages.dtype)
        out = out / deg.unsqueeze(1)
    return out


def _padded_aggregate(a, pos, nbr, valid, w_geo, aggr, use_dist, use_relpos):
    """Aggregate ``a[j] + w_geo [v_ij || l_ij]`` over padded neighbour lists.

    Same result as the scatter path; the dense max has a much cheaper backward.
    """
    V, K = nbr.shape
    if K == 0:
        return a.new_zeros(a.shape)
    rel = pos.unsqueeze(1) - pos[nbr]
    length = torch.linalg.vector_norm(rel, dim=2, keepdim=True)
    if not use_relpos:
        rel = torch.zeros_like(rel)
    if not use_dist:
        length = torch.zeros_like(length)
    msg = a[nbr] + torch.cat([rel, length], dim=2) @ w_geo.T
    mask = valid.unsqueeze(2)
    if aggr == "max":
        out = msg.masked_fill(~mask, float("-inf")).amax(dim=1)
        return torch.where(valid.any(dim=1, keepdim=True), out, torch.zeros_like(out))
    out = msg.masked_fill(~mask, 0.0).sum(dim=1)
    if aggr == "mean":
        out = out / valid.sum(dim=1, keepdim=True).clamp(min=1).to(out.dtype)
    return out


def geo_conv(x, pos, edge_index, w0, w1, aggr="max", use_dist=True, use_relpos=True, neighbors=None):
    """Graph convolution with edge geometry.

    ``x`` is (V, C_in), ``pos`` (V, 3), ``edge_index`` (2, E) with neighbour
    rows first. ``w0`` is (C_out, C_in) and ``w1`` is (C_out, C_in + 4); the
    last four columns of ``w1`` act on the relative position and edge length.
    ``neighbors`` is an optional cached :func:`neighbor_table`.
    """
    c_in = x.shape[1]
    if x.shape[0] != pos.shape[0]:
        raise ShapeError(f"{x.shape[0]} feature rows for {pos.shape[0]} vertices")
    if w0.shape[1] != c_in or w1.shape[1] != c_in + 4 or w0.shape[0] != w1.shape[0]:
        raise ShapeError(f"weights {tuple(w0.shape)}, {tuple(w1.shape)} do not fit {c_in} input channels")
    # W1 [F_j || g_ij] == (W1_f F)_j + W1_g g_ij; project before gathering
    a = x @ w1[:, :c_in].T
    w_geo = w1[:, c_in:]
    if torch.is_grad_enabled() and (x.requires_grad or w1.requires_grad):
        nbr, valid = neighbors if neighbors is not None else neighbor_table(edge_index, x.shape[0])
        agg = _padded_aggregate(a, pos, nbr, valid, w_geo, aggr, use_dist, use_relpos)
    else:
        src, dst = edge_index[0], edge_index[1]
        rel = pos[dst] - pos[src]
        length = torch.linalg.vector_norm(rel, dim=1, keepdim=True)
        if not use_relpos:
            rel = torch.zeros_like(rel)
        if not use_dist:
            length = torch.zeros_like(length)
        agg = aggregate(a[src] + torch.cat([rel, length], dim=1) @ w_geo.T, dst, x.shape[0], aggr)
    return x @ w0.T + agg


class GeoConv(nn.Module):
    def __init__(self, in_channels, out_channels, aggr="max", use_dist=True, use_relpos=True):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.aggr = aggr
        self.use_dist = use_dist
        self.use_relpos = use_relpos
        self.weight0 = nn.Parameter(torch.empty(out_channels, in_channels))
        self.weight1 = nn.Parameter(torch.empty(out_channels, in_channels + 4))
        self.reset_parameters()

    def reset_parameters(self):
        for w in (self.weight0, self.weight1):
            bound = 1.0 / math.sqrt(w.shape[1])
            nn.init.uniform_(w, -bound, bound)

    def forward(self, x, level: Level):
        nb = level.neighbors if torch.is_grad_enabled() else None
        return geo_conv(x, level.pos, level.edge_index, self.weight0, self.weight1,
                        self.aggr, self.use_dist, self.use_relpos, nb)


class GraphGroupNorm(nn.Module):
    """Group normalization with statistics per graph of a batch."""

    def __init__(self, channels, groups=8, eps=1e-5):
        super().__init__()
        if channels % groups:
            raise ValueError("channels must be divisible by groups")
        self.groups = groups
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x, level: Level):
        V, C = x.shape
        G = self.groups
        xg = x.view(V, G, C // G)
        if level.num_graphs == 1:
            mean = xg.mean(dim=(0, 2), keepdim=True)
            var = ((xg - mean) ** 2).mean(dim=(0, 2), keepdim=True)
            xn = (xg - mean) / torch.sqrt(var + self.eps)
        else:
            b = level.batch
            cnt = torch.bincount(b, minlength=level.num_graphs).to(x.dtype) * (C // G)
            s = x.new_zeros(level.num_graphs, G).index_add(0, b, xg.sum(dim=2))
            mean = (s / cnt[:, None])[b].unsqueeze(2)
            xc = xg - mean
            sq = x.new_zeros(level.num_graphs, G).index_add(0, b, (xc * xc).sum(dim=2))
            var = (sq / cnt[:, None])[b].unsqueeze(2)
            xn = xc / torch.sqrt(var + self.eps)
        return xn.reshape(V, C) * self.weight + self.bias


class ResBlock(nn.Module):
    """``x + conv2(norm2(relu(conv1(norm1(relu(x))))))``"""

    def __init__(self, channels=256, groups=8, aggr="max", use_dist=True, use_relpos=True):
        super().__init__()
        self.channels = channels
        self.norm1 = GraphGroupNorm(channels, groups)
        self.conv1 = GeoConv(channels, channels, aggr, use_dist, use_relpos)
        self.norm2 = GraphGroupNorm(channels, groups)
        self.conv2 = GeoConv(channels, channels, aggr, use_dist, use_relpos)

    def forward(self, x, level: Level):
        if x.shape[1] != self.channels:
            raise ShapeError(f"ResBlock expects {self.channels} channels, got {x.shape[1]}")
        h = self.conv1(self.norm1(F.relu(x), level), level)
        h = self.conv2(self.norm2(F.relu(h), level), level)
        return x + h


def pool_features(x, cluster, num_coarse):
    s = x.new_zeros((num_coarse, x.shape[1])).index_add(0, cluster, x)
    cnt = torch.bincount(cluster, minlength=num_coarse).clamp(min=1).to(x.dtype)
    return s / cnt.unsqueeze(1)


def _check(x, stage):
    if not torch.isfinite(x).all():
        raise NumericError("non-finite activations", stage=stage)


class GeoUNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config.channels
        kw = dict(aggr=config.aggr, use_dist=config.use_dist, use_relpos=config.use_relpos)
        blk = lambda: ResBlock(c, config.groups, **kw)  # noqa: E731
        self.config = config
        self.stem = GeoConv(config.in_channels, c, **kw)
        self.encoder = nn.ModuleList(
            [nn.ModuleList([blk() for _ in range(config.blocks)]) for _ in range(config.depth)])
        self.bottleneck = nn.ModuleList([blk() for _ in range(config.blocks)])
        self.decoder = nn.ModuleList(
            [nn.ModuleList([blk() for _ in range(config.blocks)]) for _ in range(config.depth)])
        self.head_norm = GraphGroupNorm(c, config.groups)
        self.head = nn.Sequential(nn.Linear(c, c), nn.ReLU(), nn.Linear(c, c))

    def forward(self, hb: HierarchyBatch, check_finite=False):
        depth = self.config.depth
        if len(hb.cluster_maps) != depth:
            raise ShapeError(f"hierarchy has {len(hb.cluster_maps)} poolings, model expects {depth}")
        x = self.stem(hb.features, hb.levels[0])
        if check_finite:
            _check(x, "stem")
        skips = []
        for l in range(depth):
            for b in self.encoder[l]:
                x = b(x, hb.levels[l])
            skips.append(x)
            x = pool_features(x, hb.cluster_maps[l], hb.levels[l + 1].num_vertices)
            if check_finite:
                _check(x, f"encoder[{l}]")
        for b in self.bottleneck:
            x = b(x, hb.levels[depth])
        if check_finite:
            _check(x, "bottleneck")
        for l in reversed(range(depth)):
            x = x[hb.cluster_maps[l]] + skips[l]
            for b in self.decoder[l]:
                x = b(x, hb.levels[l])
            if check_finite:
                _check(x, f"decoder[{l}]")
        x = self.head(F.relu(self.head_norm(x, hb.levels[0])))
        if check_finite:
            _check(x, "head")
        return x


class DistanceMLP(nn.Module):
    """Three affine layers (C -> 256 -> 256 -> 1) on the squared difference."""

    def __init__(self, channels=256, hidden=256):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Linear(channels, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, 1),
        )

    def forward(self, p, q):
        return self.layers((p - q) ** 2).squeeze(-1)


class EuclideanDecoder(nn.Module):
    def forward(self, p, q):
        return torch.linalg.vector_norm(p - q, dim=-1)


def euclidean_decode(p, q):
    """Plain Euclidean distance between embeddings."""
    p, q = torch.as_tensor(p), torch.as_tensor(q)
    return torch.linalg.vector_norm(p - q, dim=-1)


class GeodesicEmbeddingNet(nn.Module):
    """U-Net embedding plus pair decoder; the full set of trainable weights."""

    def __init__(self, config: ModelConfig = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.unet = GeoUNet(self.config)
        if self.config.decoder == "mlp":
            self.decoder = DistanceMLP(self.config.channels)
        else:
            self.decoder = EuclideanDecoder()

    def embed(self, hb: HierarchyBatch, check_finite=False):
        return self.unet(hb, check_finite)

    def decode(self, p, q):
        """Raw decoder output (unclamped, used for training)."""
        return self.decoder(p, q)


def decode_distance(p, q, decoder) -> torch.Tensor:
    """Inference decode, clamped at zero. Accepts single vectors or row batches."""
    if isinstance(decoder, GeodesicEmbeddingNet):
        decoder = decoder.decoder
    with torch.no_grad():
        p = torch.as_tensor(p)
        q = torch.as_tensor(q)
        w = next(decoder.parameters(), None)
        if w is not None:
            p, q = p.to(w.dtype), q.to(w.dtype)
        return decoder(p, q).clamp(min=0.0)


# --------------------------------------------------------------------------
# Embedding tables
# --------------------------------------------------------------------------

GEMB_MAGIC = b"GEMB"
GEMB_VERSION = 1


@dataclass(eq=False)
class EmbeddingTable:
    vectors: np.ndarray
    mesh_checksum: int

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise ShapeError("embedding table must be 2-D")
        if not np.all(np.isfinite(self.vectors)):
            raise NumericError("embedding table has non-finite entries", stage="embedding")

    @property
    def num_vertices(self):
        return self.vectors.shape[0]

    @property
    def channels(self):
        return self.vectors.shape[1]

    def check_mesh(self, mesh: TriangleMesh):
        if mesh.checksum != self.mesh_checksum or mesh.num_vertices != self.num_vertices:
            raise ChecksumMismatchError(
                f"embedding bound to mesh {self.mesh_checksum:016x}, got {mesh.checksum:016x}")

    def to_bytes(self) -> bytes:
        V, C = self.vectors.shape
        head = GEMB_MAGIC + struct.pack("<IQQI", GEMB_VERSION, self.mesh_checksum, V, C)
        return head + self.vectors.astype("<f4").tobytes()

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes, path=None):
        if len(data) < 28 or data[:4] != GEMB_MAGIC:
            raise MeshFormatError("not a GEMB file (bad magic)", path)
        version, checksum, V, C = struct.unpack("<IQQI", data[4:28])
        if version != GEMB_VERSION:
            raise MeshFormatError(f"unsupported GEMB version {version}", path)
        if len(data) != 28 + 4 * V * C:
            raise MeshFormatError("GEMB size does not match header", path)
        vec = np.frombuffer(data, dtype="<f4", offset=28, count=V * C).reshape(V, C)
        return cls(vec.astype(np.float32), checksum)

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes(), path)


def unet_forward(mesh_or_graph, model: GeodesicEmbeddingNet) -> EmbeddingTable:
    """Embed every vertex with one forward pass (inference, finite-checked)."""
    hb = prepare_mesh(mesh_or_graph, model.config)
    dtype = next(model.parameters()).dtype
    if dtype != torch.float32:
        hb = hb.to(dtype)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            emb = model.embed(hb, check_finite=True)
    finally:
        model.train(was_training)
    checksum = mesh_or_graph.checksum if isinstance(mesh_or_graph, TriangleMesh) else 0
    return EmbeddingTable(emb.float().numpy(), checksum)


def batched_decode(table: EmbeddingTable, pairs, decoder) -> np.ndarray:
    """Decode many (i, j) pairs with one decoder evaluation."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        return np.zeros(0)
    if pairs.min() < 0 or pairs.max() >= table.num_vertices:
        raise IndexError("pair index outside the embedding table")
    vec = torch.from_numpy(table.vectors)
    return decode_distance(vec[pairs[:, 0]], vec[pairs[:, 1]], decoder).double().numpy()
