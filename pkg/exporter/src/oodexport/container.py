"""Writer for the sectioned tensor container consumed by the analysis toolkit.

The format is the interface between the two packages, so this is an
independent implementation of the byte layout rather than an import:

    magic   4 bytes ASCII "ETLT"
    version u32 = 1
    count   u32 number of sections
    per section:
        name_len u16, name UTF-8
        dtype    u8 (1 = float32, 2 = float64, 3 = uint8)
        rank     u8
        dims     rank * u64
        payload  row-major, product(dims) * dtype-size bytes

Everything is little-endian. Writes are atomic: the file either appears
complete or not at all.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from typing import Mapping, Sequence

import numpy as np

MAGIC = b"ETLT"
VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("u1"): 3}


class ContainerError(Exception):
    """A section cannot be represented in the format."""


def encode_tags(tags: Sequence[str]) -> np.ndarray:
    """String table convention: newline-joined UTF-8 as a uint8 vector."""
    for t in tags:
        if "\n" in t:
            raise ContainerError(f"tag {t!r} contains a newline")
    return np.frombuffer("\n".join(tags).encode("utf-8"), dtype="u1").copy()


def serialize(sections: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    for name, arr in sections.items():
        arr = np.asarray(arr)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # would promote 0-d to 1-d, hence the guard
        if arr.dtype not in _DTYPE_CODES:
            raise ContainerError(f"section {name!r} has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ContainerError(f"section name too long: {len(encoded)} bytes")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def write_container(path: str, sections: Mapping[str, np.ndarray]) -> str:
    """Write atomically and return the sha256 hex digest of the payload."""
    payload = serialize(sections)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".etlt")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return hashlib.sha256(payload).hexdigest()
