"""FSVT tensor container: ``b"FSVT"``, u32 rank, u64 dims, float64 payload, all little-endian."""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"FSVT"


def dumps(arr) -> bytes:
    arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes(order="C")


def loads(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise ValueError("not an FSVT buffer (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 4)
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    start = 8 + 8 * rank
    count = int(np.prod(dims)) if rank else 1
    payload = buf[start:start + 8 * count]
    if len(payload) != 8 * count:
        raise ValueError("truncated FSVT payload")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)


def save(path, arr) -> None:
    Path(path).write_bytes(dumps(arr))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())


def save_checkpoint(directory, params: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """One FSVT file per parameter plus ``manifest.json`` listing names and shapes."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, arr) in enumerate(params.items()):
        fname = f"p{i:04d}.fsvt"
        save(d / fname, arr)
        entries.append({"name": name, "file": fname, "shape": list(np.shape(arr))})
    manifest = {"params": entries, "meta": meta or {}}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    params = {e["name"]: load(d / e["file"]) for e in manifest["params"]}
    return params, manifest.get("meta", {})
