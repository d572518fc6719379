"""Versioned binary container used by split, model and checkpoint files.

Layout::

    magic bytes
    uint64  header length, then the JSON header (utf-8, sorted keys)
    uint32  array count
    per array: 1-byte kind ('f' float64 | 'i' int64), uint8 ndim,
               ndim x uint64 shape, row-major little-endian payload
    32-byte SHA-256 digest of everything above
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import ArtifactFormatError, ArtifactVersionError, ChecksumError

_DIGEST = 32
_KINDS = {"f": np.dtype("<f8"), "i": np.dtype("<i8")}


def encode(magic: bytes, header: dict[str, Any], arrays: Sequence[np.ndarray]) -> bytes:
    parts = [magic]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<Q", len(blob)))
    parts.append(blob)
    parts.append(struct.pack("<I", len(arrays)))
    for arr in arrays:
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            kind = "f"
        elif arr.dtype.kind in "iub":
            kind = "i"
        else:
            raise TypeError(f"unsupported array dtype {arr.dtype}")
        data = np.ascontiguousarray(arr, dtype=_KINDS[kind])
        parts.append(struct.pack("<cB", kind.encode(), data.ndim))
        parts.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        parts.append(data.tobytes(order="C"))
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode(magic: bytes, raw: bytes) -> tuple[dict[str, Any], list[np.ndarray]]:
    if not raw.startswith(magic):
        found = raw[: len(magic)]
        raise ArtifactVersionError(f"expected magic {magic!r}, found {found!r}")
    if len(raw) < len(magic) + _DIGEST:
        raise ChecksumError("file too short to hold a checksum")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checksum mismatch: file is corrupted or truncated")

    pos = len(magic)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise ArtifactFormatError("unexpected end of payload")
        chunk = body[pos : pos + n]
        pos += n
        return chunk

    (hlen,) = struct.unpack("<Q", take(8))
    header = json.loads(take(hlen).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    arrays = []
    for _ in range(count):
        kind, ndim = struct.unpack("<cB", take(2))
        dtype = _KINDS.get(kind.decode())
        if dtype is None:
            raise ArtifactFormatError(f"unknown array kind {kind!r}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(take(size * 8), dtype=dtype).reshape(shape)
        arrays.append(arr.astype(dtype.newbyteorder("="), copy=True))
    if pos != len(body):
        raise ArtifactFormatError("trailing bytes after last array")
    return header, arrays


def write(path: str | os.PathLike, magic: bytes, header: dict[str, Any],
          arrays: Sequence[np.ndarray]) -> None:
    Path(path).write_bytes(encode(magic, header, arrays))


def read(path: str | os.PathLike, magic: bytes) -> tuple[dict[str, Any], list[np.ndarray]]:
    return decode(magic, Path(path).read_bytes())
