"""Simple binary container of named typed arrays.

Used for body-model files and trainer checkpoints. Layout (all integers
little-endian):

    bytes 0..7    magic  b"SKARRAY1"
    bytes 8..11   uint32 array count
    directory     one record per array:
                      uint16  name length, then name bytes (utf-8)
                      uint16  dtype string length, then numpy dtype str
                              (e.g. "<f8", "<i8")
                      uint8   ndim
                      uint32  per dimension
                      uint64  payload byte offset (from file start)
    payloads      raw little-endian array bytes, C order, in directory order

The directory is written densely after the header; offsets are absolute so
readers can seek straight to a single array.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SKARRAY1"


class FormatError(ValueError):
    """File is not a valid container (bad magic, truncated, corrupt)."""


class ValidationError(ValueError):
    """File parsed but the contents violate a contract."""


def write_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays to a container file."""
    entries = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        entries.append((name, arr))

    directory = b""
    records = []
    for name, arr in entries:
        name_b = name.encode("utf-8")
        dtype_b = arr.dtype.str.encode("ascii")
        rec = struct.pack("<H", len(name_b)) + name_b
        rec += struct.pack("<H", len(dtype_b)) + dtype_b
        rec += struct.pack("<B", arr.ndim)
        rec += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
        records.append(rec)

    header_size = len(MAGIC) + 4 + sum(len(r) + 8 for r in records)
    offset = header_size
    for rec, (_, arr) in zip(records, entries):
        directory += rec + struct.pack("<Q", offset)
        offset += arr.nbytes

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(entries)))
        f.write(directory)
        for _, arr in entries:
            f.write(arr.tobytes())


def read_arrays(path: str | Path) -> dict[str, np.ndarray]:
    """Read all arrays from a container file.

    Raises FormatError for bad magic, truncation or corrupt directory data.
    """
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 4:
        raise FormatError(f"{path}: file too short for container header")
    if data[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:8]!r}")
    (count,) = struct.unpack_from("<I", data, len(MAGIC))
    pos = len(MAGIC) + 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise FormatError(f"{path}: truncated directory")
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        if pos + name_len > len(data):
            raise FormatError(f"{path}: truncated array name")
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (dtype_len,) = take("<H")
        dtype_str = data[pos : pos + dtype_len].decode("ascii")
        pos += dtype_len
        try:
            dtype = np.dtype(dtype_str)
        except TypeError as exc:
            raise FormatError(f"{path}: unknown dtype {dtype_str!r} for {name!r}") from exc
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        (offset,) = take("<Q")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        if offset + nbytes > len(data):
            raise FormatError(f"{path}: truncated payload for array {name!r}")
        arrays[name] = np.frombuffer(data[offset : offset + nbytes], dtype=dtype).reshape(shape).copy()
    return arrays
