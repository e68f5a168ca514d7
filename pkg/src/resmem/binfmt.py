"""Versioned little-endian container used for checkpoints, mask databases and editor state.

Layout::

    magic (8 bytes) | version u32 | header length u32 | header (UTF-8 JSON)
    | tensor payloads (raw little-endian, in header order) | sha256 of everything before (32 bytes)

The header carries a ``tensors`` list of ``{name, dtype, shape}`` records.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "uint64": "<u8", "int64": "<i8", "uint8": "u1"}


class FormatError(ValueError):
    """Raised for a wrong magic, version mismatch, or failed checksum."""


def write_container(path, magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    manifest = []
    payload = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.name
        if dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {dtype} for {name}")
        manifest.append({"name": name, "dtype": dtype, "shape": list(arr.shape)})
        payload.append(np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes())
    head = dict(header)
    head["tensors"] = manifest
    head_bytes = json.dumps(head, sort_keys=True).encode("utf-8")
    body = magic + struct.pack("<II", FORMAT_VERSION, len(head_bytes)) + head_bytes + b"".join(payload)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 48:
        raise FormatError(f"{path}: truncated file")
    body, digest = raw[:-32], raw[-32:]
    if body[:8] != magic:
        raise FormatError(f"{path}: bad magic {body[:8]!r}, expected {magic!r}")
    if hashlib.sha256(body).digest() != digest:
        raise FormatError(f"{path}: checksum mismatch")
    version, head_len = struct.unpack("<II", body[8:16])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    header = json.loads(body[16 : 16 + head_len].decode("utf-8"))
    offset = 16 + head_len
    arrays = {}
    for rec in header.pop("tensors"):
        dt = np.dtype(_DTYPES[rec["dtype"]])
        n = int(np.prod(rec["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype=dt, count=n, offset=offset).reshape(rec["shape"])
        arrays[rec["name"]] = arr.astype(rec["dtype"])
        offset += n * dt.itemsize
    if offset != len(body):
        raise FormatError(f"{path}: trailing bytes after payload")
    return header, arrays


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
