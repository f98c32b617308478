"""Triangle meshes: loading, cleaning, normalization, normals and the vertex graph."""

from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import DegenerateGeometryError, EmptyMeshError, MeshFormatError

logger = logging.getLogger(__name__)

FALLBACK_NORMAL = np.array([0.0, 0.0, 1.0])
# Quantization step used by the mesh checksum.
CHECKSUM_GRID = 1e-6


def _readonly(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Indexed triangle mesh with per-vertex unit normals.

    Arrays are stored read-only; operations return new meshes.
    ``normals`` is computed (area weighted) when not given.
    """

    positions: np.ndarray
    faces: np.ndarray
    normals: np.ndarray = field(default=None)

    def __post_init__(self):
        pos = _readonly(self.positions, np.float64)
        faces = _readonly(np.asarray(self.faces).reshape(-1, 3), np.int64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be (V, 3), got {pos.shape}")
        if len(faces):
            if faces.min() < 0 or faces.max() >= len(pos):
                raise ValueError("face index out of range")
            if np.any((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2])
                      | (faces[:, 0] == faces[:, 2])):
                raise ValueError("face with repeated vertex index; clean faces first")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "faces", faces)
        if self.normals is None:
            normals = compute_vertex_normals(pos, faces)
        else:
            normals = np.asarray(self.normals, dtype=np.float64)
            if normals.shape != pos.shape:
                raise ValueError("normals must match positions")
        object.__setattr__(self, "normals", _readonly(normals, np.float64))

    @property
    def num_vertices(self) -> int:
        return len(self.positions)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    @cached_property
    def checksum(self) -> int:
        return mesh_checksum(self)

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as an (E, 2) array with ``i < j``."""
        return _face_edges(self.faces)

    def face_areas(self) -> np.ndarray:
        return face_areas(self.positions, self.faces)

    def __repr__(self):
        return f"TriangleMesh(V={self.num_vertices}, F={self.num_faces})"


@dataclass(frozen=True, eq=False)
class VertexGraph:
    """Undirected vertex graph with per-vertex geometry.

    ``edges`` holds each undirected edge once as ``(i, j)`` with ``i < j``.
    """

    positions: np.ndarray
    normals: np.ndarray
    edges: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "positions", _readonly(self.positions, np.float64))
        object.__setattr__(self, "normals", _readonly(self.normals, np.float64))
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "edges", _readonly(edges, np.int64))

    @property
    def num_vertices(self) -> int:
        return len(self.positions)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def directed_edges(self) -> np.ndarray:
        """(2, 2E) array of (source, target) rows covering both directions."""
        e = self.edges
        return np.concatenate([e, e[:, ::-1]], axis=0).T.copy()

    def edge_lengths(self) -> np.ndarray:
        d = self.positions[self.edges[:, 0]] - self.positions[self.edges[:, 1]]
        return np.linalg.norm(d, axis=1)

    def weighted_adjacency(self) -> sparse.csr_matrix:
        """Symmetric sparse matrix of Euclidean edge lengths."""
        n = self.num_vertices
        w = self.edge_lengths()
        i, j = self.edges[:, 0], self.edges[:, 1]
        return sparse.csr_matrix(
            (np.concatenate([w, w]), (np.concatenate([i, j]), np.concatenate([j, i]))),
            shape=(n, n),
        )

    def degree(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.num_vertices)


def _face_edges(faces):
    if len(faces) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def face_areas(positions, faces):
    p = positions[faces]
    return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)


def compute_vertex_normals(positions, faces) -> np.ndarray:
    """Area-weighted vertex normals.

    The unnormalized face normal (cross product of two edges) has length twice
    the face area, so summing it per vertex gives the area weighting directly.
    Vertices whose summed normal is shorter than 1e-12 (isolated or cancelling)
    get ``(0, 0, 1)``.
    """
    if isinstance(positions, TriangleMesh):
        positions, faces = positions.positions, positions.faces
    positions = np.asarray(positions, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    normals = np.zeros_like(positions)
    if len(faces):
        p = positions[faces]
        fn = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        for k in range(3):
            np.add.at(normals, faces[:, k], fn)
    length = np.linalg.norm(normals, axis=1)
    bad = length < 1e-12
    normals[bad] = FALLBACK_NORMAL
    length[bad] = 1.0
    return normals / length[:, None]


def clean_faces(positions, faces, area_tol=1e-12):
    """Drop faces with repeated indices or (near) zero area.

    Returns the kept faces and the number dropped. ``area_tol`` is relative to
    the squared bounding-box diagonal.
    """
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    repeated = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
    keep = ~repeated
    if len(positions) and len(faces):
        diag2 = float(np.sum(np.ptp(positions, axis=0) ** 2))
        area = face_areas(positions, faces)
        keep &= area > area_tol * max(diag2, np.finfo(float).tiny)
    dropped = int(len(faces) - keep.sum())
    return faces[keep], dropped


def mesh_checksum(mesh: TriangleMesh) -> int:
    """64-bit hash of positions quantized to a 1e-6 grid plus face indices."""
    q = np.round(np.asarray(mesh.positions) / CHECKSUM_GRID).astype("<i8")
    h = hashlib.blake2b(digest_size=8)
    h.update(np.asarray(q.shape, dtype="<i8").tobytes())
    h.update(q.tobytes())
    h.update(np.ascontiguousarray(mesh.faces, dtype="<i8").tobytes())
    return int.from_bytes(h.digest(), "little")


def normalize_mesh(mesh: TriangleMesh) -> TriangleMesh:
    """Center on the bounding box and scale so the longest extent is 2.

    Normals are unchanged by translation and uniform scaling and are carried over.
    """
    if mesh.num_vertices < 1:
        raise DegenerateGeometryError("mesh has no vertices")
    lo = mesh.positions.min(axis=0)
    hi = mesh.positions.max(axis=0)
    longest = float((hi - lo).max())
    if not longest > 0.0:
        raise DegenerateGeometryError("all vertices coincide; cannot normalize")
    center = 0.5 * (lo + hi)
    pos = (mesh.positions - center) * (2.0 / longest)
    np.clip(pos, -1.0, 1.0, out=pos)
    return TriangleMesh(pos, mesh.faces, mesh.normals)


def build_graph(mesh: TriangleMesh) -> VertexGraph:
    """Level-0 graph: one undirected edge per distinct face edge."""
    return VertexGraph(mesh.positions, mesh.normals, mesh.edges)


# --------------------------------------------------------------------------
# File IO
# --------------------------------------------------------------------------

_FORMATS = {".obj": "obj", ".off": "off", ".ply": "ply"}


def load_mesh(path, format=None, clean=True) -> TriangleMesh:
    """Read an OBJ, OFF or PLY triangle mesh.

    Polygons are fan-triangulated. Degenerate faces are dropped with a warning.
    Positions are returned as stored (see :func:`normalize_mesh`).
    """
    path = Path(path)
    fmt = (format or _FORMATS.get(path.suffix.lower(), "")).lower()
    if fmt == "obj":
        positions, faces = _read_obj(path)
    elif fmt == "off":
        positions, faces = _read_off(path)
    elif fmt == "ply":
        positions, faces, _ = read_ply(path)
    else:
        raise MeshFormatError(f"unknown mesh format {format or path.suffix!r}", path)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) and (faces.min() < 0 or faces.max() >= len(positions)):
        raise MeshFormatError("face index out of range", path)
    if clean:
        faces, dropped = clean_faces(positions, faces)
        if dropped:
            warnings.warn(f"{path.name}: dropped {dropped} degenerate face(s)", stacklevel=2)
    if len(faces) == 0:
        raise EmptyMeshError(f"{path}: mesh has no faces")
    logger.info("loaded %s: V=%d F=%d", path.name, len(positions), len(faces))
    return TriangleMesh(positions, faces)


def _fan(poly):
    return [(poly[0], poly[k], poly[k + 1]) for k in range(1, len(poly) - 1)]


def _read_obj(path):
    verts, faces = [], []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    if len(parts) < 4:
                        raise ValueError("vertex needs 3 coordinates")
                    verts.append([float(x) for x in parts[1:4]])
                elif tag == "f":
                    if len(parts) < 4:
                        raise ValueError("face needs at least 3 vertices")
                    poly = []
                    for tok in parts[1:]:
                        k = int(tok.split("/")[0])
                        poly.append(k - 1 if k > 0 else len(verts) + k)
                    faces.extend(_fan(poly))
            except ValueError as exc:
                raise MeshFormatError(str(exc), path, lineno) from None
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64)


def _read_off(path):
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        rows = [(n, line.split("#", 1)[0].split()) for n, line in enumerate(fh, 1)]
    rows = [(n, toks) for n, toks in rows if toks]
    if not rows or not rows[0][1][0].upper().endswith("OFF"):
        raise MeshFormatError("missing OFF header", path, rows[0][0] if rows else 1)
    head = rows[0][1][1:]
    rest = rows[1:]
    if not head:
        if not rest:
            raise MeshFormatError("missing element counts", path)
        lineno, head = rest[0]
        rest = rest[1:]
    else:
        lineno = rows[0][0]
    try:
        nv, nf = int(head[0]), int(head[1])
    except (ValueError, IndexError):
        raise MeshFormatError("bad element counts", path, lineno) from None
    if len(rest) < nv + nf:
        raise MeshFormatError("unexpected end of file", path, rows[-1][0])
    verts = np.empty((nv, 3))
    for k in range(nv):
        lineno, toks = rest[k]
        try:
            verts[k] = [float(t) for t in toks[:3]]
        except ValueError:
            raise MeshFormatError("bad vertex coordinates", path, lineno) from None
        if len(toks) < 3:
            raise MeshFormatError("vertex needs 3 coordinates", path, lineno)
    faces = []
    for lineno, toks in rest[nv:nv + nf]:
        try:
            n = int(toks[0])
            poly = [int(t) for t in toks[1:1 + n]]
        except ValueError:
            raise MeshFormatError("bad face indices", path, lineno) from None
        if n < 3 or len(poly) != n:
            raise MeshFormatError("face needs at least 3 vertex indices", path, lineno)
        faces.extend(_fan(poly))
    return verts, np.array(faces, dtype=np.int64)


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply(path):
    """Read a PLY file.

    Returns ``(positions, faces, vertex_properties)`` where the last item maps
    every scalar vertex property name (e.g. ``quality``) to its array.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    elements = []
    fmt = None
    pos = 0
    lineno = 0
    while True:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise MeshFormatError("unterminated header", path, lineno)
        line = raw[pos:end].decode("ascii", errors="replace").strip()
        pos = end + 1
        lineno += 1
        parts = line.split()
        if lineno == 1:
            if line != "ply":
                raise MeshFormatError("missing 'ply' magic", path, 1)
            continue
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif parts[0] == "property":
            if not elements:
                raise MeshFormatError("property before element", path, lineno)
            try:
                if parts[1] == "list":
                    prop = (parts[4], "list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]])
                else:
                    prop = (parts[2], "scalar", _PLY_TYPES[parts[1]], None)
            except (KeyError, IndexError):
                raise MeshFormatError(f"bad property line {line!r}", path, lineno) from None
            elements[-1]["props"].append(prop)
        elif parts[0] == "end_header":
            break
        else:
            raise MeshFormatError(f"unexpected header line {line!r}", path, lineno)
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise MeshFormatError(f"unsupported PLY format {fmt!r}", path)
    body = raw[pos:]
    if fmt == "ascii":
        data = _ply_ascii(body, elements, path, lineno)
    else:
        data = _ply_binary(body, elements, "<" if fmt == "binary_little_endian" else ">", path)

    if "vertex" not in data:
        raise MeshFormatError("no vertex element", path)
    vprops = data["vertex"]
    try:
        positions = np.stack([vprops["x"], vprops["y"], vprops["z"]], axis=1).astype(np.float64)
    except KeyError:
        raise MeshFormatError("vertex element lacks x/y/z", path) from None
    faces = []
    for poly in data.get("face", {}).get("_list", []):
        if len(poly) >= 3:
            faces.extend(_fan(list(poly)))
    extra = {k: np.asarray(v) for k, v in vprops.items() if k not in ("x", "y", "z", "_list")}
    return positions, np.array(faces, dtype=np.int64).reshape(-1, 3), extra


def _ply_ascii(body, elements, path, header_lines):
    lines = body.decode("ascii", errors="replace").splitlines()
    out = {}
    li = 0
    for el in elements:
        cols = {p[0]: [] for p in el["props"] if p[1] == "scalar"}
        lists = []
        for _ in range(el["count"]):
            while li < len(lines) and not lines[li].strip():
                li += 1
            if li >= len(lines):
                raise MeshFormatError("unexpected end of file", path, header_lines + li + 1)
            toks = lines[li].split()
            k = 0
            try:
                for name, kind, t0, t1 in el["props"]:
                    if kind == "scalar":
                        cols[name].append(float(toks[k]))
                        k += 1
                    else:
                        n = int(toks[k])
                        lists.append([int(t) for t in toks[k + 1:k + 1 + n]])
                        if len(lists[-1]) != n:
                            raise IndexError
                        k += 1 + n
            except (ValueError, IndexError):
                raise MeshFormatError("malformed element row", path, header_lines + li + 1) from None
            li += 1
        d = {k: np.array(v) for k, v in cols.items()}
        d["_list"] = lists
        out[el["name"]] = d
    return out


def _ply_binary(body, elements, endian, path):
    out = {}
    offset = 0
    for el in elements:
        props = el["props"]
        n = el["count"]
        if all(p[1] == "scalar" for p in props):
            dt = np.dtype([(p[0], endian + p[2]) for p in props])
            size = dt.itemsize * n
            if offset + size > len(body):
                raise MeshFormatError(f"truncated binary data in element {el['name']!r}", path)
            arr = np.frombuffer(body, dtype=dt, count=n, offset=offset)
            offset += size
            d = {p[0]: arr[p[0]].astype(np.float64) for p in props}
            d["_list"] = []
            out[el["name"]] = d
            continue
        # Fast path: a single list property where every row has the same length.
        if len(props) == 1 and props[0][1] == "list" and n:
            cdt = np.dtype(endian + props[0][2])
            idt = np.dtype(endian + props[0][3])
            first = int(np.frombuffer(body, dtype=cdt, count=1, offset=offset)[0])
            row = np.dtype([("n", cdt), ("v", idt, (first,))])
            if offset + row.itemsize * n <= len(body):
                arr = np.frombuffer(body, dtype=row, count=n, offset=offset)
                if np.all(arr["n"] == first):
                    out[el["name"]] = {"_list": arr["v"].astype(np.int64)}
                    offset += row.itemsize * n
                    continue
        cols = {p[0]: [] for p in props if p[1] == "scalar"}
        lists = []
        for _ in range(n):
            for name, kind, t0, t1 in props:
                dt0 = np.dtype(endian + t0)
                if offset + dt0.itemsize > len(body):
                    raise MeshFormatError(f"truncated binary data in element {el['name']!r}", path)
                val = np.frombuffer(body, dtype=dt0, count=1, offset=offset)[0]
                offset += dt0.itemsize
                if kind == "scalar":
                    cols[name].append(val)
                else:
                    dt1 = np.dtype(endian + t1)
                    cnt = int(val)
                    if offset + dt1.itemsize * cnt > len(body):
                        raise MeshFormatError(f"truncated binary data in element {el['name']!r}", path)
                    lists.append(np.frombuffer(body, dtype=dt1, count=cnt, offset=offset).astype(np.int64))
                    offset += dt1.itemsize * cnt
        d = {k: np.array(v, dtype=np.float64) for k, v in cols.items()}
        d["_list"] = lists
        out[el["name"]] = d
    return out


def save_ply(path, mesh: TriangleMesh, quality=None, binary=True):
    """Write a mesh as PLY with double-precision positions.

    ``quality`` is an optional per-vertex scalar field stored as a float
    ``quality`` property (distance fields, violation masks).
    """
    pos = np.asarray(mesh.positions, dtype="<f8")
    faces = np.asarray(mesh.faces)
    nv, nf = len(pos), len(faces)
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {nv}", "property double x", "property double y", "property double z"]
    if quality is not None:
        quality = np.asarray(quality, dtype=np.float64).reshape(-1)
        if len(quality) != nv:
            raise ValueError("quality must have one value per vertex")
        header.append("property float quality")
    header += [f"element face {nf}", "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
            if quality is not None:
                fields.append(("quality", "<f4"))
            v = np.zeros(nv, dtype=fields)
            v["x"], v["y"], v["z"] = pos[:, 0], pos[:, 1], pos[:, 2]
            if quality is not None:
                v["quality"] = quality
            fh.write(v.tobytes())
            f = np.zeros(nf, dtype=[("n", "u1"), ("v", "<i4", (3,))])
            f["n"] = 3
            f["v"] = faces
            fh.write(f.tobytes())
        else:
            for k in range(nv):
                row = " ".join(repr(float(c)) for c in pos[k])
                if quality is not None:
                    row += f" {float(np.float32(quality[k]))!r}"
                fh.write((row + "\n").encode("ascii"))
            for a, b, c in faces:
                fh.write(f"3 {a} {b} {c}\n".encode("ascii"))


def save_obj(path, mesh: TriangleMesh):
    with open(path, "w") as fh:
        for x, y, z in mesh.positions.tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for a, b, c in (mesh.faces + 1).tolist():
            fh.write(f"f {a} {b} {c}\n")


def save_off(path, mesh: TriangleMesh):
    with open(path, "w") as fh:
        fh.write(f"OFF\n{mesh.num_vertices} {mesh.num_faces} 0\n")
        for x, y, z in mesh.positions.tolist():
            fh.write(f"{x!r} {y!r} {z!r}\n")
        for a, b, c in mesh.faces.tolist():
            fh.write(f"3 {a} {b} {c}\n")
