"""The ``SAF1`` binary container and atomic file helpers.

Layout (all integers little-endian u32)::

    b"SAF1" | version | record_count | record*

    record := payload_len | ndim | dim_0 .. dim_{ndim-1} | f32 data (LE, row-major)

``payload_len`` counts the bytes that follow it inside the record.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"SAF1"
VERSION = 1

_U32 = struct.Struct("<I")


class SAFError(Exception):
    code = "SAFError"

    def __init__(self, message: str):
        super().__init__(f"{self.code}: {message}")


class BadMagic(SAFError):
    code = "BadMagic"


class UnsupportedVersion(SAFError):
    code = "UnsupportedVersion"


class Truncated(SAFError):
    code = "Truncated"


class ShapeMismatch(SAFError):
    code = "ShapeMismatch"


class ManifestMismatch(SAFError):
    code = "ManifestMismatch"


def encode(arrays: Sequence[np.ndarray]) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(arrays))]
    for arr in arrays:
        arr = np.asarray(arr, dtype="<f4")
        header = _U32.pack(arr.ndim) + b"".join(_U32.pack(d) for d in arr.shape)
        body = header + arr.tobytes(order="C")
        parts.append(_U32.pack(len(body)))
        parts.append(body)
    return b"".join(parts)


def decode(buf: bytes) -> list[np.ndarray]:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, found {bytes(buf[:4])!r}")
    if len(buf) < 12:
        raise Truncated("header shorter than 12 bytes")
    (version,) = _U32.unpack_from(buf, 4)
    if version != VERSION:
        raise UnsupportedVersion(f"version {version}")
    (count,) = _U32.unpack_from(buf, 8)
    pos = 12
    out = []
    for r in range(count):
        if pos + 4 > len(buf):
            raise Truncated(f"record {r}: missing length prefix")
        (length,) = _U32.unpack_from(buf, pos)
        pos += 4
        end = pos + length
        if end > len(buf):
            raise Truncated(f"record {r}: needs {length} bytes, {len(buf) - pos} left")
        if length < 4:
            raise ShapeMismatch(f"record {r}: payload too short for a shape header")
        (ndim,) = _U32.unpack_from(buf, pos)
        header = 4 + 4 * ndim
        if header > length:
            raise ShapeMismatch(f"record {r}: shape header exceeds payload")
        shape = tuple(_U32.unpack_from(buf, pos + 4 + 4 * i)[0] for i in range(ndim))
        n = int(np.prod(shape, dtype=np.int64))
        if header + 4 * n != length:
            raise ShapeMismatch(f"record {r}: shape {shape} implies {header + 4 * n} bytes, payload has {length}")
        data = np.frombuffer(buf, dtype="<f4", count=n, offset=pos + header)
        out.append(data.reshape(shape).astype(np.float32))
        pos = end
    if pos != len(buf):
        raise ShapeMismatch(f"{len(buf) - pos} trailing bytes after {count} records")
    return out


def atomic_write(path: str | os.PathLike, data: bytes | str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_arrays(path, arrays: Iterable[np.ndarray]) -> None:
    atomic_write(path, encode(list(arrays)))


def read_arrays(path) -> list[np.ndarray]:
    return decode(Path(path).read_bytes())


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> None:
    atomic_write(path, dump_json(obj))


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
