"""Versioned binary container for named arrays plus JSON metadata.

Byte layout (all integers little-endian)::

    offset  size  field
    0       4     magic  b"GVST"
    4       2     format version (uint16, currently 1)
    6       2     kind length K (uint16)
    8       K     kind tag, ASCII (e.g. b"region", b"world", b"checkpoint")
    8+K     8     header length L (uint64)
    16+K    L     header, UTF-8 JSON:
                    {"meta": {...},
                     "arrays": [{"name", "dtype": "<f8" | "<i8",
                                 "shape": [...], "offset", "nbytes"}, ...]}
    16+K+L  ...   payload: raw array bytes, C order, at the recorded offsets
    end-32  32    SHA-256 of every preceding byte

Readers check, in order: magic, version, length (truncation), checksum.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GVST"
VERSION = 1
_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


class FormatError(Exception):
    pass


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class KindError(FormatError):
    pass


def _canonical(arr: np.ndarray) -> tuple[str, np.ndarray]:
    a = np.asarray(arr)
    if a.dtype.kind in "iub":
        return "<i8", np.ascontiguousarray(a, dtype="<i8")
    if a.dtype.kind == "f":
        return "<f8", np.ascontiguousarray(a, dtype="<f8")
    raise FormatError(f"unsupported dtype {a.dtype}")


def encode(kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None,
           version: int = VERSION) -> bytes:
    entries, blobs, offset = [], [], 0
    for name in arrays:
        tag, a = _canonical(arrays[name])
        raw = a.tobytes()
        entries.append({"name": name, "dtype": tag, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True).encode()
    k = kind.encode("ascii")
    body = (MAGIC + struct.pack("<HH", version, len(k)) + k
            + struct.pack("<Q", len(header)) + header + b"".join(blobs))
    return body + hashlib.sha256(body).digest()


def decode(blob: bytes, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise BadMagicError("not a geovista container")
    version, klen = struct.unpack_from("<HH", blob, 4)
    if version != VERSION:
        raise VersionError(f"container version {version}, reader supports {VERSION}")
    if len(blob) < 16 + klen + 32:
        raise TruncatedError("container shorter than its fixed header")
    tag = blob[8:8 + klen].decode("ascii")
    (hlen,) = struct.unpack_from("<Q", blob, 8 + klen)
    start = 16 + klen
    if len(blob) < start + hlen + 32:
        raise TruncatedError("container shorter than its header")
    try:
        header = json.loads(blob[start:start + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChecksumError("header is corrupt") from exc
    payload = start + hlen
    need = payload + sum(e["nbytes"] for e in header["arrays"]) + 32
    if len(blob) < need:
        raise TruncatedError(f"container has {len(blob)} bytes, expected {need}")
    if len(blob) > need:
        raise ChecksumError("trailing bytes after checksum")
    if hashlib.sha256(blob[:-32]).digest() != blob[-32:]:
        raise ChecksumError("checksum mismatch")
    if kind is not None and tag != kind:
        raise KindError(f"expected a {kind!r} container, found {tag!r}")
    arrays = {}
    for e in header["arrays"]:
        lo = payload + e["offset"]
        a = np.frombuffer(blob, dtype=_DTYPES[e["dtype"]], count=e["nbytes"] // 8, offset=lo)
        arrays[e["name"]] = a.reshape(e["shape"]).copy()
    return arrays, header["meta"]


def write(path, kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write atomically: a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(encode(kind, arrays, meta))
    os.replace(tmp, path)


def read(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes(), kind)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
