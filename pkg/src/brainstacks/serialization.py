"""Header + raw-float binary blobs and content hashing.

Layout of every blob file::

    uint64 little-endian  header length H
    H bytes               UTF-8 JSON header (sorted keys)
    remaining bytes       little-endian float32 payload, tensors in the
                          order listed under header["tensors"]

The header records ``payload_fnv1a64`` so a blob can be checked without a
manifest; manifests additionally record the hash of the whole file.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numba
import numpy as np

from .errors import CorruptionError, FormatError, StorageError

FNV_OFFSET = np.uint64(0xCBF29CE484222325)
FNV_PRIME = np.uint64(0x100000001B3)


@numba.njit(cache=True)
def _fnv1a64(buf, h, prime):
    for b in buf:
        h ^= np.uint64(b)
        h *= prime
    return h


def fnv1a64(data: bytes | bytearray | memoryview | np.ndarray) -> str:
    """64-bit FNV-1a digest rendered as 16 hex characters."""
    if isinstance(data, np.ndarray):
        buf = np.ascontiguousarray(data).view(np.uint8).reshape(-1)
    else:
        buf = np.frombuffer(bytes(data), dtype=np.uint8)
    return f"{int(_fnv1a64(buf, FNV_OFFSET, FNV_PRIME)):016x}"


def atomic_write(path: str | Path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
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


def pack_arrays(arrays: list[np.ndarray]) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)


def encode_blob(header: dict, named: list[tuple[str, np.ndarray]]) -> bytes:
    payload = pack_arrays([a for _, a in named])
    header = dict(header)
    header["tensors"] = [[name, list(a.shape)] for name, a in named]
    header["dtype"] = "float32"
    header["endianness"] = "little"
    header["payload_bytes"] = len(payload)
    header["payload_fnv1a64"] = fnv1a64(payload)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(hbytes)) + hbytes + payload


def write_blob(path: str | Path, header: dict, named: list[tuple[str, np.ndarray]]) -> str:
    """Atomically write a blob; returns the FNV-1a hash of the file bytes."""
    raw = encode_blob(header, named)
    atomic_write(path, raw)
    return fnv1a64(raw)


def decode_blob(raw: bytes, source: str = "<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    if len(raw) < 8:
        raise CorruptionError(f"{source}: file too short")
    (hlen,) = struct.unpack("<Q", raw[:8])
    if 8 + hlen > len(raw):
        raise CorruptionError(f"{source}: header length exceeds file size")
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{source}: unreadable header ({exc})") from exc
    if not isinstance(header, dict) or "tensors" not in header:
        raise FormatError(f"{source}: header lacks a tensor list")
    if header.get("dtype") != "float32" or header.get("endianness") != "little":
        raise FormatError(f"{source}: unsupported dtype/endianness")
    payload = raw[8 + hlen :]
    try:
        declared = sum(int(np.prod(shape)) for _, shape in header["tensors"]) * 4
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{source}: malformed tensor shapes") from exc
    if len(payload) != header.get("payload_bytes") or len(payload) != declared:
        raise CorruptionError(f"{source}: payload is {len(payload)} bytes, header declares {declared}")
    if fnv1a64(payload) != header.get("payload_fnv1a64"):
        raise CorruptionError(f"{source}: payload hash mismatch")
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in header["tensors"]:
        n = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).astype(np.float32)
        arrays[name] = arr.reshape(shape)
        offset += n * 4
    return header, arrays


def read_blob(path: str | Path, expected_hash: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Read and verify a blob.

    Raises:
        StorageError: the file does not exist.
        CorruptionError: any hash check fails.
    """
    path = Path(path)
    if not path.exists():
        raise StorageError(f"missing file {path}")
    raw = path.read_bytes()
    if expected_hash is not None and fnv1a64(raw) != expected_hash:
        raise CorruptionError(f"{path}: content hash mismatch")
    return decode_blob(raw, str(path))
