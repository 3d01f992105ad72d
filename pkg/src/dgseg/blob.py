"""Deterministic binary container: JSON header plus raw C-order array payloads.

Byte-identical output for identical content (no timestamps, sorted keys),
which zip-based formats do not guarantee.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DGSEGBLOB1\n"
FORMAT_VERSION = 1


class BlobError(RuntimeError):
    """Unreadable blob or version mismatch."""


def write_blob(path: Path | str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries = []
    payloads = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        entries.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)})
        payloads.append(arr.tobytes())
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "meta": meta, "arrays": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack(">I", len(header)))
        fh.write(header)
        for payload in payloads:
            fh.write(payload)


def read_blob(path: Path | str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise BlobError(f"{path}: not a recognized blob file")
        (header_len,) = struct.unpack(">I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise BlobError(
                f"{path}: format version {header.get('format_version')} "
                f"unsupported (expected {FORMAT_VERSION})"
            )
        arrays = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * dtype.itemsize)
            arrays[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    return header["meta"], arrays
