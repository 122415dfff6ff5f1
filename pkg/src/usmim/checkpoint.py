"""Binary checkpoint container.

Layout (little-endian)::

    b"OUSCKPT1"
    u32 entry count
    per entry: u16 name length, name (utf-8), u8 dtype (0=float32, 1=float64),
               u8 ndim, u32 dims[ndim], raw C-order data
    u64 checksum of every preceding byte (first 8 bytes of BLAKE2b, little-endian)
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"OUSCKPT1"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


def checksum(buf: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(buf, digest_size=8).digest(), "little")


def encode_entries(entries: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"entry {name}: unsupported dtype {arr.dtype}")
        code = _CODES[arr.dtype]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", checksum(body))


def decode_entries(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:8] != MAGIC:
        raise CheckpointError("bad magic bytes: not a checkpoint")
    if len(buf) < 20:
        raise CheckpointError("truncated checkpoint")
    body, tail = buf[:-8], buf[-8:]
    if struct.unpack("<Q", tail)[0] != checksum(body):
        raise CheckpointError("checksum mismatch")
    pos = 8
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            code, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            if code not in _DTYPES:
                raise CheckpointError(f"entry {name}: unknown dtype code {code}")
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(body):
                raise CheckpointError(f"entry {name}: truncated data")
            out[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
    except struct.error as e:
        raise CheckpointError(f"truncated checkpoint: {e}") from None
    if pos != len(body):
        raise CheckpointError("trailing bytes after last entry")
    return out


def save(path, entries: dict[str, np.ndarray]) -> None:
    """Write atomically: a crash never leaves a partial file at ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_entries(entries))
    os.replace(tmp, path)


def load(path) -> dict[str, np.ndarray]:
    entries = decode_entries(Path(path).read_bytes())
    version = entries.get("meta.version")
    if version is None or int(version.reshape(-1)[0]) != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {None if version is None else version.tolist()}")
    return entries


def text_entry(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def entry_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.float64).astype(np.uint8).tolist()).decode("utf-8")
