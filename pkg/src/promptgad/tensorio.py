"""Binary tensor files.

Layout (all little-endian): ``int64 ndim``, ``ndim x int64`` extents, then
the row-major ``float64`` payload. Nothing else; no magic, no padding.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch


def save_tensor(path, value) -> None:
    arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
    arr = np.asarray(arr, dtype="<f8", order="C")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<q", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
        fh.write(arr.tobytes())


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated header")
    (ndim,) = struct.unpack_from("<q", raw, 0)
    if ndim < 0 or len(raw) < 8 + 8 * ndim:
        raise ValueError(f"{path}: bad header")
    shape = struct.unpack_from(f"<{ndim}q", raw, 8)
    body = raw[8 + 8 * ndim:]
    count = int(np.prod(shape)) if ndim else 1
    if len(body) != 8 * count:
        raise ValueError(f"{path}: expected {count} values, found {len(body) // 8}")
    return np.frombuffer(body, dtype="<f8").reshape(shape).astype(np.float64)
