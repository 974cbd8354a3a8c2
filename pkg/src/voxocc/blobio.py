"""Binary container for named arrays: magic "OCCF", little-endian throughout.

Layout: magic (4 bytes), version u32, array count u32, then per array a
name (u16 length + utf-8 bytes), dtype tag u8, ndim u8, dims u32 each, and
the raw row-major payload.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"OCCF"
VERSION = 1

_TAG_TO_DTYPE = {1: "<f4", 2: "<f8", 3: "|u1", 4: "<i8"}
_KIND_TO_TAG = {("f", 4): 1, ("f", 8): 2, ("u", 1): 3, ("i", 8): 4}


class BlobFormatError(Exception):
    """Raised when a blob file is corrupt, truncated, or version-incompatible."""


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        key = (arr.dtype.kind, arr.dtype.itemsize)
        if key not in _KIND_TO_TAG:
            raise ValueError(f"unsupported dtype {arr.dtype} for array {name!r}")
        tag = _KIND_TO_TAG[key]
        arr = arr.astype(_TAG_TO_DTYPE[tag], copy=False)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        buf = f.read()

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise BlobFormatError(f"truncated blob file {path}: expected {what}")
        out = buf[pos : pos + n]
        pos += n
        return out

    pos = 0
    if take(4, "magic") != MAGIC:
        raise BlobFormatError(f"{path} is not an OCCF blob (bad magic bytes)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise BlobFormatError(f"{path}: unsupported version {version} (expected {VERSION})")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        tag, ndim = struct.unpack("<BB", take(2, "array header"))
        if tag not in _TAG_TO_DTYPE:
            raise BlobFormatError(f"{path}: unknown dtype tag {tag} for array {name!r}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        dtype = np.dtype(_TAG_TO_DTYPE[tag])
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        data = take(nbytes, f"payload of {name!r}")
        arrays[name] = np.frombuffer(data, dtype=dtype).reshape(dims).copy()
    if pos != len(buf):
        raise BlobFormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return arrays
