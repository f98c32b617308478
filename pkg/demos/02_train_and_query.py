"""Fit the network to one mesh, precompute its embedding and query distances."""

import time

import numpy as np

from geoembed import shapes
from geoembed.mesh import normalize_mesh
from geoembed.network import ModelConfig
from geoembed.oracle import SteinerOracle, sample_pairs
from geoembed.query import benchmark, evaluate_mre, open_session
from geoembed.training import TrainConfig, train

mesh = normalize_mesh(shapes.bumpy_sphere(3))  # networks expect the [-1, 1] box
oracle = SteinerOracle(mesh, 3)
samples = sample_pairs(mesh, 100, 200, oracle, seed=0)
print(f"{mesh}: {len(samples)} labelled pairs")

# small model and budget; ModelConfig() is the full 256-channel network
config = TrainConfig(epochs=150, batch_size_meshes=1, pairs_per_mesh=4096, val_fraction=0.0)
t0 = time.perf_counter()
state = train([(mesh, samples)], config, ModelConfig(channels=64),
              callback=lambda r: r["step"] % 50 == 0 and print(f"step {r['step']} loss {r['loss']:.4f}"))
print(f"trained in {time.perf_counter() - t0:.0f} s")

# one forward pass per mesh, then each query is a single decoder call
session = open_session(state.model, mesh)
print(f"precompute {session.precompute_seconds:.3f} s")
print("d(0, 100) =", session.query(0, 100), " oracle:", oracle(0)[100])
print("MRE over 100 sources:", evaluate_mre(session, mesh, oracle, num_sources=100))

for rep in benchmark(session, (1, 10_000), num_queries=20_000, repeats=1):
    print(f"batch {rep.batch_size:6d}: {rep.queries_per_second:,.0f} queries/s")
