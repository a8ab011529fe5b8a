"""Binary tensor records and content fingerprints.

Layout of one tensor record, all integers little-endian:

    u32          rank
    u32 * rank   dimension sizes
    u8           dtype tag (1 = float32, 2 = float64)
    raw buffer   row-major element bytes, little-endian

A named record prefixes the tensor with a u16 byte length and the UTF-8
name. Files holding several tensors are just named records back to back;
readers stop cleanly at end of file.

``fingerprint`` hashes the named records of a mapping in sorted-name
order with SHA-256, so two parameter sets fingerprint equal exactly when
every array matches bit for bit.
"""

from __future__ import annotations

import hashlib
import io
import struct
from typing import BinaryIO, Iterator, Mapping

import numpy as np

from .errors import FormatError

_TAG_BY_DTYPE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_DTYPE_BY_TAG = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    dt = np.dtype(arr.dtype)
    if dt not in _TAG_BY_DTYPE:
        raise FormatError(f"cannot serialize dtype {dt}; use float32 or float64")
    fh.write(struct.pack("<I", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(struct.pack("<B", _TAG_BY_DTYPE[dt]))
    fh.write(np.ascontiguousarray(arr, dtype=dt.newbyteorder("<")).tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated tensor record: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    rank = struct.unpack("<I", _read_exact(fh, 4))[0]
    if rank > 32:
        raise FormatError(f"implausible tensor rank {rank}")
    shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(rank))
    tag = struct.unpack("<B", _read_exact(fh, 1))[0]
    if tag not in _DTYPE_BY_TAG:
        raise FormatError(f"unknown dtype tag {tag}")
    dt = _DTYPE_BY_TAG[tag]
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    buf = _read_exact(fh, count * dt.itemsize)
    arr = np.frombuffer(buf, dtype=dt).reshape(shape)
    # astype copies, giving a writable native-endian array; ascontiguousarray
    # would silently promote rank-0 records to rank-1.
    return arr.astype(dt.newbyteorder("="), copy=True)


def write_named(fh: BinaryIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError(f"record name too long ({len(raw)} bytes)")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    write_tensor(fh, arr)


def read_named(fh: BinaryIO) -> tuple[str, np.ndarray] | None:
    head = fh.read(2)
    if head == b"":
        return None
    if len(head) != 2:
        raise FormatError("truncated record name length")
    n = struct.unpack("<H", head)[0]
    name = _read_exact(fh, n).decode("utf-8")
    return name, read_tensor(fh)


def iter_named(fh: BinaryIO) -> Iterator[tuple[str, np.ndarray]]:
    while True:
        rec = read_named(fh)
        if rec is None:
            return
        yield rec


def save_arrays(path, arrays: Mapping[str, np.ndarray]) -> None:
    """Write a mapping as named records in sorted-name order."""
    with open(path, "wb") as fh:
        for name in sorted(arrays):
            write_named(fh, name, arrays[name])


def load_arrays(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        for name, arr in iter_named(fh):
            if name in out:
                raise FormatError(f"duplicate record name {name!r}")
            out[name] = arr
    return out


def blob_bytes(arrays: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    for name in sorted(arrays):
        write_named(buf, name, arrays[name])
    return buf.getvalue()


def fingerprint(arrays: Mapping[str, np.ndarray]) -> str:
    """SHA-256 hex digest over the canonical named-record bytes."""
    return hashlib.sha256(blob_bytes(arrays)).hexdigest()


def fingerprint_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
