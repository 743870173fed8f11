"""Binary container for checkpoints and cached datasets.

Layout (all integers little-endian):

    magic   6 bytes  b"SSCKPT"
    version u16      currently 1
    metalen u32      length of the UTF-8 JSON metadata blob
    meta    bytes    canonical JSON (sorted keys)
    count   u32      number of records
    record  repeated: namelen u16, name utf-8, ndim u8,
            dims u32 * ndim, values float32 * prod(dims)

Writes are deterministic for identical inputs, so identical state
produces byte-identical files.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"SSCKPT"
VERSION = 1


def write_container(path, meta: dict, records):
    """Write named float arrays with a JSON metadata header.

    ``records`` is an iterable of (name, array); values are stored as
    float32 regardless of input dtype.
    """
    meta_blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        f.write(struct.pack("<I", len(meta_blob)))
        f.write(meta_blob)
        records = list(records)
        f.write(struct.pack("<I", len(records)))
        for name, arr in records:
            name_b = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f4")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.tobytes())


def read_container(path):
    """Read back (meta, {name: float32 array}); malformed input raises FormatError."""
    with open(path, "rb") as f:
        blob = f.read()

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise FormatError(f"{path}: truncated while reading {what}")
        piece = blob[off:off + n]
        off += n
        return piece

    off = 0
    magic = take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    (metalen,) = struct.unpack("<I", take(4, "metadata length"))
    try:
        meta = json.loads(take(metalen, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt metadata block: {e}") from e
    (count,) = struct.unpack("<I", take(4, "record count"))
    records = {}
    for i in range(count):
        (namelen,) = struct.unpack("<H", take(2, f"record {i} name length"))
        name = take(namelen, f"record {i} name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, f"{name}: ndim"))
        dims = tuple(
            struct.unpack("<I", take(4, f"{name}: dim {d}"))[0] for d in range(ndim)
        )
        nbytes = 4 * int(np.prod(dims, dtype=np.int64)) if dims else 4
        data = take(nbytes, f"{name}: values")
        records[name] = np.frombuffer(data, dtype="<f4").reshape(dims).copy()
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes after last record")
    return meta, records
