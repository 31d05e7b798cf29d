"""Versioned single-file container for arrays plus JSON metadata.

Layout::

    UATSCKPT\\n
    <json header>\\n          # sorted keys, describes every array
    <raw little-endian bytes of all arrays, in header order>

Writing is deterministic, so save -> load -> save yields identical bytes.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"UATSCKPT\n"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save(path, arrays: dict, meta: dict) -> Path:
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        if a.dtype.kind == "f":
            a = a.astype("<f8", copy=False)
        elif a.dtype.kind in "iub":
            a = a.astype("<i8", copy=False)
        else:
            raise CheckpointError(f"unsupported dtype {a.dtype} for {name!r}")
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"version": VERSION, "meta": meta, "arrays": entries}
    text = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(text.encode("utf-8"))
        f.write(b"\n")
        for raw in blobs:
            f.write(raw)
    return path


def load(path) -> tuple[dict, dict]:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            if f.readline() != MAGIC:
                raise CheckpointError(f"{path}: not a checkpoint file")
            header = json.loads(f.readline().decode("utf-8"))
            payload = f.read()
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    version = header.get("version")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} cannot be read by version {VERSION}")
    arrays = {}
    for e in header["arrays"]:
        chunk = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated data for {e['name']!r}")
        a = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        arrays[e["name"]] = a.astype(a.dtype.newbyteorder("="), copy=True)
    return arrays, header["meta"]
