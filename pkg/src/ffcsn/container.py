"""Binary tensor container used for checkpoints and dataset sample files.

Layout (all integers little-endian)::

    b"FFCS" | u32 version | u32 entry_count
    per entry: u16 name_len | name (UTF-8) | u8 dtype (0=f32, 1=f64) | u8 ndim
               | ndim x u64 dims | raw little-endian values
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Union

import numpy as np

MAGIC = b"FFCS"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}

PathLike = Union[str, Path]


class ContainerError(ValueError):
    pass


def encode(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise ContainerError(f"entry '{name}': unsupported dtype {arr.dtype} (only float32/float64)")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ContainerError(f"entry name too long: {name[:40]}...")
        code = _CODES[arr.dtype]
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode(buf: bytes, source: str = "<bytes>") -> "OrderedDict[str, np.ndarray]":
    def need(n: int, what: str):
        if pos + n > len(buf):
            raise ContainerError(f"{source}: truncated while reading {what}")

    pos = 0
    need(12, "header")
    if buf[:4] != MAGIC:
        raise ContainerError(f"{source}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ContainerError(f"{source}: unsupported container version {version} (expected {VERSION})")
    pos = 12
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for i in range(count):
        need(2, f"entry {i} name length")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(nlen + 2, f"entry {i} name")
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        if code not in _DTYPES:
            raise ContainerError(f"{source}: entry '{name}' has unknown dtype code {code}")
        need(8 * ndim, f"entry '{name}' dims")
        dims = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        need(nbytes, f"entry '{name}' values")
        out[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).astype(
            dt.newbyteorder("="), copy=True
        )
        pos += nbytes
    if pos != len(buf):
        raise ContainerError(f"{source}: {len(buf) - pos} trailing bytes after last entry")
    return out


def save(path: PathLike, entries: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(entries))


def load(path: PathLike) -> "OrderedDict[str, np.ndarray]":
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise ContainerError(f"{path}: cannot read ({exc.strerror})") from exc
    return decode(buf, str(path))


def pack_text(text: str) -> np.ndarray:
    """Store UTF-8 text as a float64 byte array (exact)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def unpack_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8")


def pack_json(obj) -> np.ndarray:
    return pack_text(json.dumps(obj, sort_keys=True))


def unpack_json(arr: np.ndarray):
    return json.loads(unpack_text(arr))
