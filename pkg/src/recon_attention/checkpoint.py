"""Flat binary checkpoint format.

Layout: the magic bytes ``RATN1``, then one record per named tensor until EOF:
name length (u32 LE), UTF-8 name, rank (u32 LE), each dim (u32 LE), then the
values as float32 LE in row-major order.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

MAGIC = b"RATN1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(module: torch.nn.Module, path: str | Path) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name, tensor in module.state_dict().items():
            arr = tensor.detach().cpu().numpy().astype("<f4")
            raw = name.encode()
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes(order="C"))


def read_checkpoint(path: str | Path) -> "OrderedDict[str, np.ndarray]":
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:len(MAGIC)]!r}, expected {MAGIC!r}")
    pos = len(MAGIC)
    out = OrderedDict()

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode()
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).copy()
    return out


def load_checkpoint(module: torch.nn.Module, path: str | Path) -> torch.nn.Module:
    """Load tensors into ``module``; names and shapes must match exactly."""
    stored = read_checkpoint(path)
    state = module.state_dict()
    missing = set(state) - set(stored)
    extra = set(stored) - set(state)
    if missing or extra:
        raise CheckpointError(f"checkpoint/model mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, ref in state.items():
        if tuple(ref.shape) != stored[name].shape:
            raise CheckpointError(f"shape mismatch for {name}: model {tuple(ref.shape)}, checkpoint {stored[name].shape}")
    module.load_state_dict({k: torch.from_numpy(v).to(state[k].dtype) for k, v in stored.items()})
    return module
