"""Versioned binary block files.

Layout: 8-byte magic, little-endian ``uint16`` version, ``uint32`` header
length, UTF-8 JSON header, then each array's raw little-endian row-major
bytes in the order listed under ``header["blocks"]``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sHI")


class FormatError(ValueError):
    pass


def write_blocks(path, magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    header = dict(header)
    header["blocks"] = [
        {"name": name, "dtype": np.dtype(arr.dtype).newbyteorder("<").str, "shape": list(arr.shape)}
        for name, arr in arrays.items()
    ]
    raw = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(magic, FORMAT_VERSION, len(raw)))
        fh.write(raw)
        for (name, arr), spec in zip(arrays.items(), header["blocks"]):
            fh.write(np.ascontiguousarray(arr, dtype=spec["dtype"]).tobytes())


def read_blocks(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise FormatError(f"{path}: truncated file")
    got, version, hlen = _PREFIX.unpack_from(data)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    offset = _PREFIX.size
    header = json.loads(data[offset:offset + hlen])
    offset += hlen
    arrays = {}
    for spec in header["blocks"]:
        dtype = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(data):
            raise FormatError(f"{path}: block {spec['name']} truncated")
        arrays[spec["name"]] = np.frombuffer(data, dtype, count, offset).reshape(spec["shape"]).astype(dtype.newbyteorder("="))
        offset += nbytes
    return header, arrays


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
