"""Single-file container for named arrays plus a small JSON manifest.

Used for model checkpoints, dataset files, and synthetic-set checkpoints.
The byte layout is fully deterministic (no timestamps, sorted keys, arrays
written in name order), so identical contents produce identical files --
a requirement for reproducibility checks that hash checkpoints.

Layout:
    magic (8 bytes) | header length (8 bytes, little-endian) | header JSON |
    raw C-order array bytes, concatenated in sorted name order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import IngestionError

MAGIC = b"NAMEDARR"


def write_container(path: str | Path, arrays: dict[str, np.ndarray], manifest: dict) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"manifest": manifest, "entries": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def read_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"container file not found: {path}")
    data = path.read_bytes()
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise IngestionError(f"not a named-array container: {path}")
    (header_len,) = struct.unpack("<Q", data[len(MAGIC) : len(MAGIC) + 8])
    header_start = len(MAGIC) + 8
    try:
        header = json.loads(data[header_start : header_start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IngestionError(f"corrupt container header in {path}: {exc}") from exc
    body = data[header_start + header_len :]
    arrays: dict[str, np.ndarray] = {}
    for entry in header["entries"]:
        raw = body[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise IngestionError(f"truncated array {entry['name']!r} in {path}")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()  # writable
    return arrays, header["manifest"]
