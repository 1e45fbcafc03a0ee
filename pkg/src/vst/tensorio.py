"""SPC1 binary tensors: magic, rank, dims (uint32 LE), then float32 LE payload."""
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"SPC1"


def tensor_to_bytes(array) -> bytes:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise FormatError("not an SPC1 tensor (bad magic)")
    (ndim,) = struct.unpack_from("<I", blob, 4)
    offset = 8 + 4 * ndim
    if len(blob) < offset:
        raise FormatError(f"SPC1 header truncated: expected {offset} bytes, got {len(blob)}")
    dims = struct.unpack_from(f"<{ndim}I", blob, 8)
    expected = offset + 4 * int(np.prod(dims, dtype=np.int64))
    if len(blob) != expected:
        raise FormatError(f"SPC1 payload size mismatch: expected {expected} bytes, got {len(blob)}")
    return np.frombuffer(blob, dtype="<f4", offset=offset).reshape(dims).copy()


def save_tensor(path, array) -> None:
    Path(path).write_bytes(tensor_to_bytes(array))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())
