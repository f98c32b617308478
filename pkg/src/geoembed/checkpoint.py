"""Checkpoint files: a JSON header followed by raw little-endian arrays.

Layout::

    b"GCKP" | u32 format version | u64 header length | header (UTF-8 JSON) | array data

The header lists every array under a group-prefixed name (``model.*``,
``optim.*``, ``rng.*``) with dtype, shape and byte offset, plus free-form
metadata. Keys are sorted and floats written with ``repr`` so that
save -> load -> save reproduces the file byte for byte.
"""

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"GCKP"
FORMAT_VERSION = 1


def write_checkpoint(path, arrays: dict, meta: dict):
    entries = {}
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        entries[name] = {"dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"format_version": FORMAT_VERSION, "arrays": entries, "meta": meta},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def read_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    arrays = {}
    for name, e in header["arrays"].items():
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        a = np.frombuffer(data, dtype=dt, count=count, offset=base + e["offset"]).reshape(e["shape"])
        arrays[name] = a.copy()
    return arrays, header["meta"]


def _to_numpy(t):
    return t.detach().cpu().numpy() if torch.is_tensor(t) else np.asarray(t)


def model_arrays(model):
    return {f"model.{k}": _to_numpy(v) for k, v in model.state_dict().items()}


def optimizer_arrays_and_meta(optimizer):
    sd = optimizer.state_dict()
    arrays = {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            arrays[f"optim.state.{idx}.{key}"] = _to_numpy(val)
    return arrays, {"param_groups": sd["param_groups"]}


def load_model_arrays(model, arrays):
    sd = {k[len("model."):]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith("model.")}
    model.load_state_dict(sd)


def load_optimizer_arrays(optimizer, arrays, meta):
    state = {}
    for name, val in arrays.items():
        if not name.startswith("optim.state."):
            continue
        _, _, idx, key = name.split(".", 3)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(val))
    optimizer.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
