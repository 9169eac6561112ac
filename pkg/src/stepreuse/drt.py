"""The DRT1 tensor file format and checkpoint helpers.

Layout: magic bytes ``DRT1``, u8 dtype code (0 = float64), u8 rank,
rank little-endian u32 dims, then the row-major little-endian payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DRT1"
DTYPE_F64 = 0


class DrtFormatError(ValueError):
    pass


def write_tensor(path, array: np.ndarray):
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim > 255:
        raise DrtFormatError(f"rank {arr.ndim} exceeds format limit")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BB", DTYPE_F64, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f8").tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(6)
        if len(head) < 6 or head[:4] != MAGIC:
            raise DrtFormatError(f"{path}: not a DRT1 file")
        dtype_code, rank = struct.unpack("<BB", head[4:6])
        if dtype_code != DTYPE_F64:
            raise DrtFormatError(f"{path}: unsupported dtype code {dtype_code}")
        dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        payload = fh.read(8 * count)
        if len(payload) != 8 * count:
            raise DrtFormatError(f"{path}: truncated payload")
        return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)


def _safe_name(name: str) -> str:
    return name.replace("/", "_").replace("\\", "_")


def save_state(directory, state: dict[str, np.ndarray], manifest: dict,
               manifest_name="manifest.json"):
    """One DRT1 file per tensor plus a JSON manifest naming them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, arr in state.items():
        fname = _safe_name(name) + ".drt"
        write_tensor(directory / fname, arr)
        files[name] = fname
    payload = dict(manifest)
    payload["tensors"] = files
    with open(directory / manifest_name, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_state(directory, manifest_name="manifest.json"):
    """Returns (state dict, manifest dict)."""
    directory = Path(directory)
    manifest_path = directory / manifest_name
    if not manifest_path.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest_path}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    state = {name: read_tensor(directory / fname)
             for name, fname in manifest["tensors"].items()}
    return state, manifest
