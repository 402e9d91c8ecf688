"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic b"CLDMCKPT"
    4 bytes   format version (uint32)
    8 bytes   header length N (uint64)
    N bytes   UTF-8 JSON header: kind, config, step, rng state, extra
              metadata and the ordered tensor table (name, shape)
    ...       tensor payloads, row-major float32, in table order

The header is serialized with sorted keys so identical inputs produce
identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

MAGIC = b"CLDMCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    path,
    kind: str,
    config: Mapping[str, Any],
    state: Mapping[str, torch.Tensor],
    step: int = 0,
    rng_state: Any = None,
    extra: Mapping[str, Any] | None = None,
) -> None:
    tensors = []
    blobs = []
    for name, t in state.items():
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy()
        tensors.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.astype("<f4", copy=False).tobytes(order="C"))
    header = {
        "kind": kind,
        "format_version": FORMAT_VERSION,
        "config": dict(config),
        "step": int(step),
        "rng_state": rng_state,
        "extra": dict(extra or {}),
        "tensors": tensors,
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load_checkpoint(path, kind: str | None = None):
    """Return ``(header, state)`` where state maps names to float32 tensors."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", data[8:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (n,) = struct.unpack("<Q", data[12:20])
    header = json.loads(data[20 : 20 + n].decode("utf-8"))
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {header['kind']}")
    offset = 20 + n
    state = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
        offset += 4 * count
    if offset != len(data):
        raise CheckpointError(f"{path}: trailing bytes after tensor payload")
    return header, state


def state_fingerprint(state: Mapping[str, torch.Tensor]) -> str:
    """sha256 over parameter names, shapes and raw bytes."""
    h = hashlib.sha256()
    for name, t in state.items():
        arr = t.detach().cpu().contiguous().numpy()
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(str(arr.dtype).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
