"""Command line entry point: ``geoembed <subcommand> ...``.

Subcommands: gen-data, train, embed, query, eval, bench, trace, shape-hist.
Run ``geoembed <subcommand> --help`` for the flags of each.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .applications import shape_distribution, trace_geodesic_path
from .errors import PartialPathError
from .mesh import load_mesh, normalize_mesh, save_ply
from .network import EmbeddingTable, ModelConfig
from .oracle import (
    BiharmonicOracle, EuclideanOracle, GeodesicSampleSet, SteinerOracle, build_spectral_basis, sample_pairs,
)
from .query import (
    OracleSession, QuerySession, benchmark, evaluate_mre, export_field_ply, open_session,
    time_precompute, triangle_violation_mask, violation_fraction,
)
from .training import TrainConfig, TrainState, init_state, train

logger = logging.getLogger("geoembed")

MESH_SUFFIXES = (".ply", ".obj", ".off")
CONFIG_SECTIONS = ("data_dir", "out_dir", "train", "model")


class CliError(Exception):
    pass


def derive_seed(seed: int, *names) -> int:
    """Independent, reproducible sub-seed for a named consumer of randomness."""
    h = hashlib.blake2b(":".join([str(seed), *map(str, names)]).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little") >> 1


def load_normalized(path):
    """Load a mesh; rescale into the [-1, 1] box unless it is already there."""
    mesh = load_mesh(path)
    if np.abs(mesh.positions).max() > 1.0:
        mesh = normalize_mesh(mesh)
    return mesh


def make_oracle(name, mesh, steiner=3, modes=64):
    if name == "steiner":
        return SteinerOracle(mesh, steiner)
    if name == "biharmonic":
        return BiharmonicOracle(mesh, build_spectral_basis(mesh, min(modes, mesh.num_vertices - 1)))
    if name == "euclidean":
        return EuclideanOracle(mesh)
    raise CliError(f"unknown oracle {name!r}")


def load_model(checkpoint):
    if not Path(checkpoint).is_file():
        raise CliError(f"checkpoint not found: {checkpoint}")
    model = TrainState.load(checkpoint).model
    model.eval()
    return model


def distance_source(args, mesh):
    """Session for --checkpoint (optionally with --embedding) or an exact --oracle."""
    if getattr(args, "oracle", None):
        return OracleSession(make_oracle(args.oracle, mesh, args.steiner), mesh)
    if not args.checkpoint:
        raise CliError("either --checkpoint or --oracle is required")
    model = load_model(args.checkpoint)
    if getattr(args, "embedding", None):
        table = EmbeddingTable.load(args.embedding)
        table.check_mesh(mesh)
        return QuerySession(table, model, mesh.checksum)
    return open_session(model, mesh)


def read_config(path):
    """Validated JSON training config: sections data_dir, out_dir, train, model."""
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise CliError("config must be a JSON object")
    for key in cfg:
        if key not in CONFIG_SECTIONS:
            raise CliError(f"unknown config key {key!r}")
    allowed = {"train": TrainConfig.field_names(), "model": set(ModelConfig().to_dict())}
    for section, names in allowed.items():
        sub = cfg.get(section, {})
        if not isinstance(sub, dict):
            raise CliError(f"config section {section!r} must be an object")
        for key in sub:
            if key not in names:
                raise CliError(f"unknown config key '{section}.{key}'")
    return cfg


def load_dataset(data_dir):
    """Pairs of (mesh, sample set) matched by file stem."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise CliError(f"data directory not found: {data_dir}")
    items = []
    for gset in sorted(data_dir.glob("*.gset")):
        mesh_path = next((gset.with_suffix(s) for s in MESH_SUFFIXES if gset.with_suffix(s).is_file()), None)
        if mesh_path is None:
            raise CliError(f"no mesh next to {gset.name}")
        mesh = load_mesh(mesh_path)
        samples = GeodesicSampleSet.load(gset)
        samples.check_mesh(mesh)
        items.append((mesh, samples))
    if not items:
        raise CliError(f"no .gset files in {data_dir}")
    return items


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_gen_data(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    for path in args.meshes:
        path = Path(path)
        try:
            mesh = normalize_mesh(load_mesh(path))
            oracle = make_oracle(args.oracle, mesh, args.steiner, args.modes)
            n_src = min(args.sources, mesh.num_vertices)
            n_dst = min(args.dests, mesh.num_vertices - 1)
            samples = sample_pairs(mesh, n_src, n_dst, oracle, seed=derive_seed(args.seed, "gen-data", path.stem))
            save_ply(out / f"{path.stem}.ply", mesh)
            samples.save(out / f"{path.stem}.gset")
            print(f"{path.name}: V={mesh.num_vertices} pairs={len(samples)} "
                  f"dropped={samples.dropped} (unreachable={samples.dropped_unreachable} "
                  f"duplicate={samples.dropped_duplicates})")
        except Exception as exc:  # keep going, report at the end
            failures += 1
            print(f"error: {path}: {exc}", file=sys.stderr)
    if failures:
        raise CliError(f"{failures} mesh(es) failed")


def cmd_train(args):
    cfg = read_config(args.config) if args.config else {}
    data_dir = args.data_dir or cfg.get("data_dir")
    out_dir = Path(args.out_dir or cfg.get("out_dir") or "runs")
    if not data_dir:
        raise CliError("no data directory (config 'data_dir' or --data-dir)")
    tcfg = dict(cfg.get("train", {}))
    if args.epochs is not None:
        tcfg["epochs"] = args.epochs
    if args.explicit_seed is not None:
        tcfg["seed"] = args.explicit_seed
    tcfg.setdefault("checkpoint_dir", str(out_dir))
    tcfg.setdefault("log_path", str(out_dir / "train_log.jsonl"))
    try:
        config = TrainConfig(**tcfg)
        mcfg = ModelConfig(**cfg.get("model", {}))
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}") from None
    data = load_dataset(data_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.log_path:
        Path(config.log_path).parent.mkdir(parents=True, exist_ok=True)
    if config.epochs == 0:
        state = init_state(config, mcfg)
        state.save(Path(config.checkpoint_dir) / "last.gckp")
        print(f"wrote initial checkpoint {Path(config.checkpoint_dir) / 'last.gckp'}")
        return
    t0 = time.perf_counter()
    state = train(data, config, mcfg)
    epochs = [h for h in _read_log(config.log_path) if "train_mre" in h]
    final = epochs[-1] if epochs else {}
    print(json.dumps({"epochs": state.epoch, "steps": state.step, "seconds": round(time.perf_counter() - t0, 3),
                      "final_train_mre": final.get("train_mre"), "final_val_mre": final.get("val_mre"),
                      "checkpoint": str(Path(config.checkpoint_dir) / "last.gckp")}))


def _read_log(path):
    if not path or not Path(path).is_file():
        return []
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def cmd_embed(args):
    mesh = load_normalized(args.mesh)
    model = load_model(args.checkpoint)
    t0 = time.perf_counter()
    session = open_session(model, mesh, args.out)
    print(f"wrote {args.out}: V={session.num_vertices} C={session.table.channels} "
          f"precompute {time.perf_counter() - t0:.4f} s")


def _read_pairs(args):
    if args.pairs_file:
        text = Path(args.pairs_file).read_text().split()
        vals = [int(t) for t in text]
    else:
        vals = list(args.pairs or [])
    if len(vals) % 2:
        raise CliError("pairs must come as 'i j' couples")
    return np.asarray(vals, dtype=np.int64).reshape(-1, 2)


def cmd_query(args):
    table = EmbeddingTable.load(args.embedding)
    checksum = table.mesh_checksum
    if args.mesh:
        mesh = load_normalized(args.mesh)
        table.check_mesh(mesh)
    session = QuerySession(table, load_model(args.checkpoint), checksum)
    pairs = _read_pairs(args)
    for d in session.query_batch(pairs):
        print(f"{d:.9g}")


def cmd_eval(args):
    mesh = load_normalized(args.mesh)
    oracle = make_oracle(args.truth, mesh, args.steiner, args.modes)
    if args.oracle_as_model:
        predictor = OracleSession(oracle, mesh)
    else:
        args.oracle = None
        predictor = distance_source(args, mesh)
    n = min(args.sources, mesh.num_vertices)
    mre = evaluate_mre(predictor, mesh, oracle, n, seed=derive_seed(args.seed, "eval"))
    record = {"mesh": str(args.mesh), "vertices": mesh.num_vertices, "sources": n, "mre": mre}
    if args.triangle_pairs:
        record["triangle_violation_fraction"] = violation_fraction(
            predictor, args.triangle_pairs, seed=derive_seed(args.seed, "triangle"))
    print(json.dumps(record))
    if args.field_out:
        export_field_ply(args.field_out, mesh, predictor.distances_from(args.field_source))
    if args.violations_out:
        p, q = args.violation_pair
        export_field_ply(args.violations_out, mesh, triangle_violation_mask(predictor, p, q).astype(float))


def cmd_bench(args):
    mesh = load_normalized(args.mesh)
    model = load_model(args.checkpoint)
    pre = time_precompute(model, mesh, args.repeats)
    session = open_session(model, mesh)
    reports = benchmark(session, args.batch_sizes, args.queries, args.repeats,
                        seed=derive_seed(args.seed, "bench"), precompute_seconds=pre)
    lines = [r.to_json() for r in reports]
    for line in lines:
        print(line)
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")


def cmd_trace(args):
    if args.source == args.target:
        raise CliError("source and target must differ")
    mesh = load_normalized(args.mesh)
    session = distance_source(args, mesh)
    try:
        path = trace_geodesic_path(mesh, session, args.source, args.target, args.max_steps)
    except PartialPathError as exc:
        if args.out and len(exc.prefix):
            exc.prefix.save_obj(args.out)
        raise CliError(f"path incomplete ({len(exc.prefix)} points kept): {exc}") from None
    if args.out:
        path.save_obj(args.out)
    print(json.dumps({"points": len(path), "length": path.total_length}))


def cmd_shape_hist(args):
    mesh = load_normalized(args.mesh)
    session = distance_source(args, mesh)
    hist = shape_distribution(mesh, session, args.pairs, args.bins, seed=derive_seed(args.seed, "shape-hist"))
    if args.out:
        hist.save_text(args.out)
    else:
        for c, v in zip(hist.centers, hist.normalized()):
            print(f"{c:.9g} {v:.9g}")


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def _add_source_flags(p, oracle_choices=("steiner", "euclidean", "biharmonic")):
    p.add_argument("--checkpoint", help="trained model checkpoint (.gckp)")
    p.add_argument("--embedding", help="precomputed GEMB table for the mesh (skips the forward pass)")
    p.add_argument("--oracle", choices=oracle_choices, help="use exact oracle distances instead of a model")
    p.add_argument("--steiner", type=int, default=3, help="Steiner points per edge for the oracle (default 3)")


def build_parser():
    parser = argparse.ArgumentParser(prog="geoembed", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None,
                        help="root seed for every random choice (default 0; for train, overrides train.seed)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("gen-data", help="normalize meshes and write oracle-labelled pair sets")
    p.add_argument("meshes", nargs="+", help="input meshes (.obj, .off, .ply)")
    p.add_argument("--out", required=True, help="output directory for <name>.ply and <name>.gset")
    p.add_argument("--sources", type=int, default=100, help="source vertices per mesh (default 100)")
    p.add_argument("--dests", type=int, default=200, help="destinations per source (default 200)")
    p.add_argument("--oracle", choices=("steiner", "biharmonic"), default="steiner",
                   help="distance labels (default steiner)")
    p.add_argument("--steiner", type=int, default=3, help="Steiner points per edge (default 3)")
    p.add_argument("--modes", type=int, default=64, help="eigenpairs for biharmonic labels (default 64)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a gen-data directory")
    p.add_argument("--config", help="JSON config with sections data_dir, out_dir, train, model")
    p.add_argument("--data-dir", help="overrides config data_dir")
    p.add_argument("--out-dir", help="overrides config out_dir (checkpoints and train_log.jsonl)")
    p.add_argument("--epochs", type=int, help="overrides train.epochs; 0 writes the initial checkpoint only")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="precompute the embedding table of a mesh")
    p.add_argument("--checkpoint", required=True, help="trained model checkpoint (.gckp)")
    p.add_argument("--mesh", required=True, help="mesh file")
    p.add_argument("--out", required=True, help="output GEMB file")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("query", help="print distances for vertex pairs, one per line")
    p.add_argument("--embedding", required=True, help="GEMB table")
    p.add_argument("--checkpoint", required=True, help="checkpoint holding the decoder")
    p.add_argument("--mesh", help="optional mesh to verify the table against")
    p.add_argument("--pairs-file", help="whitespace-separated 'i j' pairs")
    p.add_argument("pairs", nargs="*", type=int, help="inline pairs: i j [i j ...]")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="MRE against an oracle over random source vertices")
    p.add_argument("--mesh", required=True, help="mesh file")
    p.add_argument("--checkpoint", help="trained model checkpoint")
    p.add_argument("--embedding", help="precomputed GEMB table for the mesh")
    p.add_argument("--oracle-as-model", action="store_true", help="predict with the ground-truth oracle (MRE 0)")
    p.add_argument("--truth", choices=("steiner", "biharmonic"), default="steiner",
                   help="ground-truth oracle (default steiner)")
    p.add_argument("--steiner", type=int, default=3, help="Steiner points per edge (default 3)")
    p.add_argument("--modes", type=int, default=64, help="eigenpairs for biharmonic truth (default 64)")
    p.add_argument("--sources", type=int, default=500, help="random source vertices (default 500)")
    p.add_argument("--triangle-pairs", type=int, default=0,
                   help="also report the triangle-inequality violation fraction over this many pairs")
    p.add_argument("--field-out", help="write the predicted field from --field-source as PLY quality")
    p.add_argument("--field-source", type=int, default=0, help="source vertex for --field-out (default 0)")
    p.add_argument("--violations-out", help="write the violation mask for --violation-pair as PLY quality")
    p.add_argument("--violation-pair", type=int, nargs=2, default=(0, 1), metavar=("P", "Q"),
                   help="pair for --violations-out (default 0 1)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="precompute time and query throughput")
    p.add_argument("--checkpoint", required=True, help="trained model checkpoint")
    p.add_argument("--mesh", required=True, help="mesh file")
    p.add_argument("--batch-sizes", type=int, nargs="+", default=[1, 100, 10_000],
                   help="query batch sizes (default 1 100 10000)")
    p.add_argument("--queries", type=int, default=1_000_000, help="queries per timed pass (default 1000000)")
    p.add_argument("--repeats", type=int, default=5, help="timed passes; the median is reported (default 5)")
    p.add_argument("--out", help="also write the JSON-lines report here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("trace", help="trace a geodesic path and write it as a polyline OBJ")
    p.add_argument("--mesh", required=True, help="mesh file")
    _add_source_flags(p)
    p.add_argument("--source", type=int, required=True, help="source vertex")
    p.add_argument("--target", type=int, required=True, help="target vertex (the walk starts here)")
    p.add_argument("--max-steps", type=int, default=10_000, help="triangle steps before giving up (default 10000)")
    p.add_argument("--out", help="output OBJ polyline")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("shape-hist", help="histogram of pairwise distances (two-column text)")
    p.add_argument("--mesh", required=True, help="mesh file")
    _add_source_flags(p)
    p.add_argument("--pairs", type=int, default=100_000, help="random vertex pairs (default 100000)")
    p.add_argument("--bins", type=int, default=64, help="histogram bins (default 64)")
    p.add_argument("--out", help="output text file (default: standard output)")
    p.set_defaults(func=cmd_shape_hist)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    explicit_seed = args.seed
    args.seed = 0 if args.seed is None else args.seed
    args.explicit_seed = explicit_seed
    torch.manual_seed(derive_seed(args.seed, "torch"))
    try:
        args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, IndexError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
