"""Versioned binary container for named numpy tensors plus JSON metadata.

Layout (all integers little-endian)::

    8 bytes   magic  b"CBFTNSR\\0"
    4 bytes   uint32 format version
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header: {"meta": {...}, "tensors": [{"name", "dtype",
              "shape", "offset", "nbytes"}, ...]}, keys sorted, no whitespace
    ...       tensor payloads, C order, in header order, offsets relative to
              the end of the header

Tensors are stored sorted by name and the JSON is canonical, so writing the
same content twice yields identical bytes.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"CBFTNSR\0"
FORMAT_VERSION = 1
_ALLOWED = {"<f4", "<f8", "<i8", "<i4", "|u1", "|i1", "<u8"}


class TensorFileError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    entries = []
    payload = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        dt = arr.dtype.str
        if dt not in _ALLOWED:
            raise TensorFileError(f"unsupported dtype {dt} for tensor {name!r}")
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": dt, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": dict(meta or {}), "tensors": entries},
                        sort_keys=True, separators=(",", ":"), allow_nan=True).encode()
    return b"".join([MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(header)), header, *payload])


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if data[:8] != MAGIC:
        raise TensorFileError("bad magic: not a tensor file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != FORMAT_VERSION:
        raise TensorFileError(f"unsupported format version {version}")
    header = json.loads(data[20:20 + hlen])
    base = 20 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        buf = data[start:start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise TensorFileError(f"truncated payload for {e['name']!r}")
        tensors[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return tensors, header["meta"]


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray],
         meta: Mapping[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(tensors, meta))
    os.replace(tmp, path)
    return path


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return loads(Path(path).read_bytes())
