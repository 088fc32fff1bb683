"""Parameter checkpoint container.

Layout::

    FRAGMIX-PARAMS 1\\n
    <header byte length as decimal>\\n
    <JSON header, UTF-8, indented>
    <raw little-endian tensor data, concatenated>

The header lists every tensor as ``{"name", "shape", "dtype", "offset",
"nbytes"}`` with offsets relative to the start of the data section, plus
an arbitrary ``meta`` object for callers (model config, optimiser step...).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import DataError

MAGIC = b"FRAGMIX-PARAMS 1\n"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def dumps(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        key = arr.dtype.name
        if key not in _DTYPES:
            raise DataError(f"unsupported checkpoint dtype {key} for {name!r}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[key]).tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": key, "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta or {}}, indent=1, sort_keys=True).encode()
    return MAGIC + f"{len(header)}\n".encode() + header + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if not blob.startswith(MAGIC):
        raise DataError("not a fragmix parameter file (bad magic)")
    rest = blob[len(MAGIC) :]
    nl = rest.find(b"\n")
    try:
        hlen = int(rest[:nl])
    except ValueError:
        raise DataError("corrupt checkpoint header length") from None
    header = json.loads(rest[nl + 1 : nl + 1 + hlen])
    data = rest[nl + 1 + hlen :]
    out = {}
    for e in header["tensors"]:
        start, stop = e["offset"], e["offset"] + e["nbytes"]
        if stop > len(data):
            raise DataError(f"checkpoint truncated while reading {e['name']!r}")
        arr = np.frombuffer(data[start:stop], dtype=_DTYPES[e["dtype"]]).astype(e["dtype"])
        out[e["name"]] = arr.reshape(e["shape"])
    return out, header.get("meta", {})


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
