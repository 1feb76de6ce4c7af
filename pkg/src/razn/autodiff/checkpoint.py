"""Binary checkpoint container.

Layout::

    RAZNCKPT\\n
    <header byte length as decimal>\\n
    <JSON header>
    <payload: raw little-endian float32 arrays, back to back>

The header records ``version``, ``step``, free-form ``meta`` and one entry per
array with ``name``, ``shape``, ``offset`` and ``nbytes`` (offsets relative to
the payload start).
"""

from __future__ import annotations

import json
import os
from collections import OrderedDict
from pathlib import Path

import numpy as np

from ..errors import ArtifactMismatchError

MAGIC = b"RAZNCKPT\n"
VERSION = 1
_PAYLOAD_DTYPE = np.dtype("<f4")


def save_checkpoint(path, arrays: dict[str, np.ndarray], step: int, meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        buf = np.ascontiguousarray(arr, dtype=_PAYLOAD_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(buf)})
        blobs.append(buf)
        offset += len(buf)
    header = {"version": VERSION, "step": int(step), "dtype": "float32-le", "meta": meta or {}, "entries": entries}
    head = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(head)}\n".encode())
        fh.write(head)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        header, _ = _read_header(fh)
    return header


def _read_header(fh) -> tuple[dict, int]:
    if fh.readline() != MAGIC:
        raise ArtifactMismatchError("not a checkpoint file (bad magic)")
    try:
        n = int(fh.readline().strip())
        header = json.loads(fh.read(n))
    except ValueError as exc:
        raise ArtifactMismatchError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("version") != VERSION:
        raise ArtifactMismatchError(f"unsupported checkpoint version {header.get('version')}")
    return header, fh.tell()


def load_checkpoint(path) -> tuple[OrderedDict[str, np.ndarray], dict]:
    """Return ``(arrays, header)``; arrays come back as native float32."""
    with open(path, "rb") as fh:
        header, start = _read_header(fh)
        payload = fh.read()
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    for e in header["entries"]:
        lo, hi = e["offset"], e["offset"] + e["nbytes"]
        if hi > len(payload):
            raise ArtifactMismatchError(f"truncated payload for {e['name']}")
        arr = np.frombuffer(payload[lo:hi], dtype=_PAYLOAD_DTYPE).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(np.float32)
    return arrays, header
