"""Ground-truth distances: graph Dijkstra, Steiner refinement and biharmonic."""

import numpy as np

from geoembed import shapes
from geoembed.oracle import (
    BiharmonicOracle, DijkstraOracle, SteinerOracle, build_spectral_basis, compute_fields,
)

sphere = shapes.icosphere(4)  # unit sphere, 2562 vertices
exact = np.arccos(np.clip(sphere.positions @ sphere.positions[0], -1, 1))  # great circle from vertex 0

for name, oracle in [("dijkstra", DijkstraOracle(sphere)),
                     ("steiner k=1", SteinerOracle(sphere, 1)),
                     ("steiner k=3", SteinerOracle(sphere, 3))]:
    d = compute_fields(oracle, [0])[0]
    rel = np.abs(d[1:] - exact[1:]) / exact[1:]
    print(f"{name:12s} mean rel. error {100 * rel.mean():.2f}%  max {100 * rel.max():.2f}%")

# edge paths zig-zag; points on edges let the path cut across faces
# biharmonic distance is smooth everywhere, including at the source
basis = build_spectral_basis(shapes.icosphere(3), 64)
print("orthonormality error", basis.orthonormality_error())
bh = BiharmonicOracle(shapes.icosphere(3), basis)(0)
print("biharmonic: nearest", np.sort(bh)[1:4], "farthest", bh.max())
