"""Single-file checkpoint container.

Layout: ``b"VSTC"``, uint32 format version, uint64 header length, a JSON
header (metadata + tensor table of name/dtype/shape/offset/nbytes), then the
raw little-endian tensor blobs back to back.
"""
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError

MAGIC = b"VSTC"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


def save_checkpoint(path, tensors: dict, meta: dict) -> None:
    table, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = tensors[name]
        if torch.is_tensor(arr):
            arr = arr.detach().cpu().numpy()
        arr = np.asarray(arr, order="C")  # ascontiguousarray would promote 0-d to 1-d
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": table}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path):
    """Returns ``(tensors, meta)`` with tensors as torch tensors."""
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        raise FormatError(f"{path}: too short for a checkpoint")
    magic, version, n_header = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, not a checkpoint")
    if version != VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, this build reads {VERSION}")
    start = _PREFIX.size + n_header
    try:
        header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from exc
    tensors = {}
    for entry in header["tensors"]:
        lo = start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(blob):
            raise FormatError(f"{path}: tensor {entry['name']} truncated: expected {hi} bytes, got {len(blob)}")
        arr = np.frombuffer(blob[lo:hi], dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return tensors, header["meta"]


def prefixed(prefix, state: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in state.items()}


def unprefixed(prefix, tensors: dict) -> dict:
    p = prefix + "."
    return {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}


def optimizer_to_flat(prefix, optimizer):
    """Split an optimizer state dict into tensors and JSON-able param groups."""
    sd = optimizer.state_dict()
    tensors, scalars = {}, {}
    for pid, st in sd["state"].items():
        for k, v in st.items():
            key = f"{prefix}.state.{pid}.{k}"
            if torch.is_tensor(v):
                tensors[key] = v
            else:
                scalars[key] = v
    return tensors, {"param_groups": sd["param_groups"], "scalars": scalars}


def optimizer_from_flat(prefix, tensors, info, optimizer):
    state = {}
    p = prefix + ".state."
    for key, v in tensors.items():
        if key.startswith(p):
            pid, name = key[len(p):].split(".", 1)
            state.setdefault(int(pid), {})[name] = v.clone()
    for key, v in info.get("scalars", {}).items():
        pid, name = key[len(p):].split(".", 1)
        state.setdefault(int(pid), {})[name] = v
    groups = info["param_groups"]
    for g in groups:
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
    optimizer.load_state_dict({"state": state, "param_groups": groups})
