"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"LWMK" | u16 version | u32 count
    repeated count times:
        u16 name_len | name (utf-8) | u8 dtype tag | u8 rank | u32 dims[rank] | payload
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"LWMK"
VERSION = 1
_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "|u1", 4: "<i4", 5: "|b1"}
_TAGS = {np.dtype(v): k for k, v in _DTYPES.items()}


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    """CRC mismatch."""


class CheckpointVersionError(CheckpointError):
    """Unsupported format version."""


class TruncatedCheckpointError(CheckpointError):
    """File ends before the declared contents."""


def dumps(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if np.dtype(dt) not in _TAGS:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", _TAGS[np.dtype(dt)], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_TAGS[np.dtype(dt)]]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 14 or buf[:4] != MAGIC:
        if len(buf) >= 4 and buf[:4] != MAGIC:
            raise CorruptCheckpointError("bad magic")
        raise TruncatedCheckpointError("file shorter than header")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
    pos = 10
    out: dict[str, np.ndarray] = {}

    def need(n: int) -> None:
        if pos + n > len(buf) - 4:
            raise TruncatedCheckpointError(f"truncated at byte {pos}")

    for _ in range(count):
        need(2)
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(nlen + 2)
        name = buf[pos : pos + nlen].decode("utf-8", errors="replace")
        pos += nlen
        tag, rank = struct.unpack_from("<BB", buf, pos)
        pos += 2
        if tag not in _DTYPES:
            raise CorruptCheckpointError(f"unknown dtype tag {tag}")
        need(4 * rank)
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        dt = np.dtype(_DTYPES[tag])
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        need(nbytes)
        out[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
        pos += nbytes
    if pos != len(buf) - 4:
        raise TruncatedCheckpointError("trailing bytes do not match declared contents")
    (crc,) = struct.unpack_from("<I", buf, pos)
    if crc != zlib.crc32(buf[:pos]) & 0xFFFFFFFF:
        raise CorruptCheckpointError("CRC32 mismatch")
    return out


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(arrays))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def pack_json(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def unpack_json(arr: np.ndarray):
    return json.loads(bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8"))
