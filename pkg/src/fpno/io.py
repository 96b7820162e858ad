"""Versioned binary container for models and datasets.

Layout (all integers little-endian)::

    magic    8 bytes   b"FPNOBIN\\0"
    version  uint32
    kind     8 bytes   ASCII, NUL padded ("model" or "dataset")
    hlen     uint64    length of the JSON header
    header   hlen bytes, UTF-8 JSON with sorted keys
    payload  arrays back to back, row-major, dtype and shape listed in the header
    digest   32 bytes  SHA-256 of everything above

Floating arrays are stored as ``<f8`` and index arrays as ``<i8``, so a
save/load/save cycle reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .exceptions import FormatError

MAGIC = b"FPNOBIN\0"
VERSION = 1
_PREFIX = struct.Struct("<8sI8sQ")
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


def _code(arr):
    if arr.dtype.kind == "f":
        return "f8"
    if arr.dtype.kind in "iub":
        return "i8"
    raise FormatError(f"unsupported array dtype {arr.dtype}")


def dumps(kind, header, arrays):
    """Serialise ``header`` (JSON-able dict) and named ``arrays`` to bytes."""
    specs = []
    chunks = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _code(arr)
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        specs.append({"name": name, "dtype": code, "shape": list(data.shape)})
        chunks.append(data.tobytes())
    meta = json.dumps({"meta": header, "arrays": specs}, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    tag = kind.encode("ascii")
    if len(tag) > 8:
        raise ValueError("container kind longer than 8 bytes")
    body = _PREFIX.pack(MAGIC, VERSION, tag.ljust(8, b"\0"), len(meta)) + meta + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def loads(blob, kind=None):
    """Inverse of :func:`dumps`; returns ``(kind, header, arrays)``."""
    if len(blob) < _PREFIX.size + 32:
        raise FormatError("container truncated")
    body, digest = blob[:-32], blob[-32:]
    magic, version, tag, hlen = _PREFIX.unpack_from(body)
    if magic != MAGIC:
        raise FormatError("not an fpno container")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version} (expected {VERSION})")
    if hashlib.sha256(body).digest() != digest:
        raise FormatError("checksum mismatch (corrupt or truncated file)")
    found = tag.rstrip(b"\0").decode("ascii")
    if kind is not None and found != kind:
        raise FormatError(f"expected a {kind} container, found {found}")
    start = _PREFIX.size
    try:
        head = json.loads(body[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad header: {exc}") from None
    offset = start + hlen
    arrays = {}
    for spec in head["arrays"]:
        dtype = _DTYPES[spec["dtype"]]
        count = int(np.prod(spec["shape"], dtype=np.int64))
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(body):
            raise FormatError(f"payload for {spec['name']!r} truncated")
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
        arrays[spec["name"]] = arr.reshape(spec["shape"]).copy()
        offset += nbytes
    if offset != len(body):
        raise FormatError("trailing bytes after payload")
    return found, head["meta"], arrays


def write(path, kind, header, arrays):
    blob = dumps(kind, header, arrays)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def read(path, kind=None):
    with open(path, "rb") as fh:
        return loads(fh.read(), kind)
