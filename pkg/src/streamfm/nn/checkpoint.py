"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic        8 bytes   b"SFMCKPT\\0"
    version      uint32    FORMAT_VERSION
    meta_len     uint32
    meta         meta_len bytes of UTF-8 JSON (sorted keys): model config echo,
                 train config, seed, step counters
    n_entries    uint32
    entries      n_entries x {
                   name_len uint16, name (UTF-8),
                   dtype    uint8 (0 = float64, 1 = float32),
                   ndim     uint8, dims ndim x uint32,
                   data     raw little-endian values, C order
                 }
    crc32        uint32 over every preceding byte

Saving writes to a temporary file and renames it, so a crash never leaves a
half-written checkpoint under the target name.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import CorruptFileError, VersionMismatchError

__all__ = ["FORMAT_VERSION", "MAGIC", "write_checkpoint", "read_checkpoint"]

MAGIC = b"SFMCKPT\0"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


def encode(meta: dict, arrays: dict) -> bytes:
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta_raw)), meta_raw,
             struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode()
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(raw: bytes) -> tuple[dict, dict]:
    if len(raw) < len(MAGIC) + 12:
        raise CorruptFileError("checkpoint truncated")
    if raw[: len(MAGIC)] != MAGIC:
        raise CorruptFileError("not a checkpoint (bad magic)")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    version, meta_len = struct.unpack_from("<II", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format {version}, expected {FORMAT_VERSION}")
    if zlib.crc32(body) != crc:
        raise CorruptFileError("checkpoint checksum mismatch (truncated or damaged)")
    pos = len(MAGIC) + 8
    try:
        meta = json.loads(body[pos : pos + meta_len].decode())
        pos += meta_len
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        arrays = {}
        for _ in range(n):
            (nl,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + nl].decode()
            pos += nl
            code, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            dt = _DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + size > len(body):
                raise CorruptFileError(f"entry {name!r} runs past end of file")
            arrays[name] = np.frombuffer(body, dtype=dt, count=size // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += size
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"malformed checkpoint: {exc}") from exc
    if pos != len(body):
        raise CorruptFileError("trailing bytes after last entry")
    return meta, arrays


def write_checkpoint(path, meta: dict, arrays: dict) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(meta, arrays))
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict, dict]:
    return decode(Path(path).read_bytes())
