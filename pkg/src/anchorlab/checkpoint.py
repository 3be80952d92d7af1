"""Flat named-tensor checkpoint container.

Layout (all integers little-endian)::

    magic   8 bytes   b"ANCHCKPT"
    hlen    uint64    length of the JSON header in bytes
    header  hlen      UTF-8 JSON: {"tensors": [{"name", "dtype", "shape", "offset", "nbytes"}],
                                   "meta": {...}}
    data    ...       concatenated tensor payloads, C order, little-endian

``offset`` counts from the first byte after the header.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"ANCHCKPT"
_DTYPES = {"<f4": np.float32, "<f8": np.float64, "<i8": np.int64}


def save_tensors(path, tensors: dict, meta: dict | None = None):
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr, order="C")
        code = arr.dtype.newbyteorder("<").str
        if code not in _DTYPES:
            raise ValueError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = arr.astype(code, copy=False).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_tensors(path):
    """Returns ``(tensors, meta)`` with tensors as numpy arrays in file order."""
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen))
        data = fh.read()
    out = {}
    for e in header["tensors"]:
        raw = data[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ValueError(f"truncated payload for {e['name']!r}")
        out[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
    return out, header.get("meta", {})
