"""Versioned flat binary checkpoints with a key/value metadata sidecar.

Layout (all little-endian)::

    8 bytes   magic  b"INFOCKPT"
    uint32    format version (1)
    uint32    entry count
    per entry:
      uint16  name length, then UTF-8 name
      uint8   ndim, then ndim x uint32 dims
      float32 payload, row-major

The sidecar ``<path>.meta`` is a ``key = value`` text file.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .textio import read_kv, write_kv

MAGIC = b"INFOCKPT"
VERSION = 1


def save_checkpoint(path, arrays, meta):
    path = Path(path)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path.write_bytes(b"".join(chunks))
    write_kv(meta_path(path), {"format_version": VERSION, **meta})


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    buf = path.read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    pos = 16
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 4 * size
    meta = read_kv(meta_path(path)) if meta_path(path).exists() else {}
    return arrays, meta


def meta_path(path):
    path = Path(path)
    return path.with_name(path.name + ".meta")


def parse_floats(text):
    return np.array([float(v) for v in text.split(",")]) if text else None
