"""Binary model container and atomic file helpers.

One format serves dense, compressed, and mixed models so that an all-dense
materialization round-trips byte-identical to its input file.

Byte layout (all integers little-endian):

    offset  size        field
    0       4           magic b"RKLM"
    4       4           format version (u32), currently 1
    8       8           header length in bytes (u64)
    16      header_len  canonical JSON header (utf-8, sorted keys, no spaces)
    ...     payload     tensor data, float64 little-endian, row-major,
                        concatenated in the header's "tensors" order
    end-4   4           CRC-32 (u32) of header bytes + payload

The header carries {"dims": {...}, "layers": {name: {"mode": "dense"} |
{"mode": "lowrank", "rank": r}}, "tensors": [{"name", "rows", "cols"}, ...]}.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .errors import RankAllocError

MAGIC = b"RKLM"
VERSION = 1


class FormatError(RankAllocError, OSError):
    """Model file fails its magic, version, or checksum."""


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write via a temp file in the same directory plus rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def pack_model(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    names = [t["name"] for t in header["tensors"]]
    if set(names) != set(tensors):
        raise FormatError("header tensor list does not match payload tensors")
    payload = b"".join(
        np.ascontiguousarray(tensors[name], dtype="<f8").tobytes() for name in names)
    head = canonical_json(header)
    body = head + payload
    return (MAGIC + struct.pack("<I", VERSION) + struct.pack("<Q", len(head))
            + body + struct.pack("<I", zlib.crc32(body)))


def unpack_model(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < 20 or data[:4] != MAGIC:
        raise FormatError("not a model file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported model format version {version}")
    (head_len,) = struct.unpack_from("<Q", data, 8)
    body = data[16:-4]
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(body) != crc:
        raise FormatError("model file checksum mismatch (corrupt or truncated)")
    if head_len > len(body):
        raise FormatError("model file header length out of bounds")
    header = json.loads(body[:head_len].decode("utf-8"))
    payload = body[head_len:]
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["tensors"]:
        rows, cols = int(entry["rows"]), int(entry["cols"])
        nbytes = rows * cols * 8
        if offset + nbytes > len(payload):
            raise FormatError("model file payload truncated")
        flat = np.frombuffer(payload, dtype="<f8", count=rows * cols, offset=offset)
        tensors[entry["name"]] = flat.reshape(rows, cols).astype(np.float64)
        offset += nbytes
    if offset != len(payload):
        raise FormatError("model file payload has trailing bytes")
    return header, tensors


def save_model_file(path: str | Path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, pack_model(header, tensors))


def load_model_file(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise
    return unpack_model(data)
