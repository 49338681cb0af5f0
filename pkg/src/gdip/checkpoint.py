"""Binary checkpoint container.

Layout::

    b"GDIP1\\n"
    uint64 little-endian header length
    UTF-8 JSON header {"config": ..., "meta": ..., "tensors": [{"name", "shape", "offset"}]}
    float64 little-endian tensor data, concatenated in header order
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"GDIP1\n"


def save_checkpoint(path: str | os.PathLike, params: dict[str, np.ndarray], config: dict,
                    meta: dict | None = None) -> None:
    entries, offset = [], 0
    names = sorted(params)
    for name in names:
        arr = np.asarray(params[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = json.dumps({"config": config, "meta": meta or {}, "tensors": entries},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name in names:
            fh.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict, dict]:
    """Returns ``(params, config, meta)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise ValueError(f"{path}: not a GDIP1 checkpoint")
    pos = len(MAGIC)
    (n,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    header = json.loads(blob[pos:pos + n].decode("utf-8"))
    data = memoryview(blob)[pos + n:]
    params = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=entry["offset"])
        params[entry["name"]] = arr.astype(np.float64).reshape(entry["shape"])
    return params, header["config"], header["meta"]
