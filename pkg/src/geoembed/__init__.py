"""Learned geodesic embeddings for constant-time distance queries on triangle meshes.

A graph U-Net maps every mesh vertex to a 256-d vector once per mesh; a small
MLP then decodes the geodesic distance of any vertex pair from the two vectors.
"""

from .applications import (
    GeodesicPath, ShapeDistribution, compare_distributions, shape_distribution, trace_geodesic_path,
)
from .errors import (
    ChecksumMismatchError, DegenerateGeometryError, EmptyMeshError, MeshFormatError, NumericError,
    PartialPathError, ShapeError,
)
from .mesh import TriangleMesh, VertexGraph, build_graph, load_mesh, normalize_mesh, save_obj, save_off, save_ply
from .network import (
    DistanceMLP, EmbeddingTable, GeoConv, GeodesicEmbeddingNet, GeoUNet, ModelConfig, ResBlock,
    batched_decode, build_hierarchy, decode_distance, euclidean_decode, geo_conv, geo_pool, geo_unpool,
    unet_forward,
)
from .oracle import (
    BiharmonicOracle, DijkstraOracle, EuclideanOracle, GeodesicSampleSet, SpectralBasis, SteinerOracle,
    biharmonic_distances, build_spectral_basis, dijkstra_distances, sample_pairs, steiner_refined_distances,
)
from .query import (
    BenchmarkReport, OracleSession, QuerySession, benchmark, evaluate_mre, load_session, open_session,
    precompute_embedding, triangle_violations,
)
from .training import TrainConfig, TrainState, finetune, mre_loss, train, train_biharmonic

__version__ = "0.1.0"
