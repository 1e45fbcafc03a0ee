"""Seed derivation: every random stream hangs off one root seed by a fixed label."""
import os
import zlib

import numpy as np
import torch


def _label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def derive_seed(root: int, label: str) -> int:
    seq = np.random.SeedSequence([int(root), _label_key(label)])
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def stream(root: int, label: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(root), _label_key(label)]))


def deterministic_requested() -> bool:
    return os.environ.get("VST_DETERMINISTIC", "0") not in ("", "0", "false", "False")


def set_deterministic(enabled: bool = True) -> None:
    """Force single-threaded, deterministic torch kernels."""
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    else:
        torch.use_deterministic_algorithms(False)
