"""Binary tensor trace files.

Single record layout::

    b"FKV1" | u8 rank | rank x u32 dims (LE) | float32 LE payload, row-major

A container is a u32 LE record count followed by that many records.
``read_trace`` accepts both forms and always returns a list.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, ShapeError

MAGIC = b"FKV1"
MAX_RANK = 5
_DIM_LIMIT = 2**32 - 1


@dataclass(frozen=True)
class TensorBlob:
    dims: tuple[int, ...]
    payload: bytes

    def __post_init__(self) -> None:
        if not 1 <= len(self.dims) <= MAX_RANK:
            raise ShapeError(f"blob rank must be in 1..{MAX_RANK}, got {len(self.dims)}")
        if any(d <= 0 or d > _DIM_LIMIT for d in self.dims):
            raise ShapeError(f"blob dims must be positive u32 values, got {self.dims}")
        if len(self.payload) != math.prod(self.dims) * 4:
            raise ShapeError(f"payload is {len(self.payload)} bytes, dims {self.dims} need {math.prod(self.dims) * 4}")

    @classmethod
    def from_array(cls, array: np.ndarray) -> "TensorBlob":
        arr = np.ascontiguousarray(array, dtype="<f4")
        if not np.isfinite(arr).all():
            raise ShapeError("blob values must be finite")
        return cls(tuple(int(d) for d in arr.shape), arr.tobytes())

    def to_array(self) -> np.ndarray:
        return np.frombuffer(self.payload, dtype="<f4").reshape(self.dims).copy()


def _encode(blob: TensorBlob) -> bytes:
    header = MAGIC + struct.pack("<B", len(blob.dims)) + struct.pack(f"<{len(blob.dims)}I", *blob.dims)
    return header + blob.payload


def write_trace(path: str | os.PathLike, blobs: TensorBlob | Sequence[TensorBlob]) -> None:
    """Write one blob as a bare record, or a sequence as a counted container."""
    with open(path, "wb") as fh:
        if isinstance(blobs, TensorBlob):
            fh.write(_encode(blobs))
            return
        blobs = list(blobs)
        fh.write(struct.pack("<I", len(blobs)))
        for blob in blobs:
            fh.write(_encode(blob))


def _decode_record(buf: memoryview, offset: int) -> tuple[TensorBlob, int]:
    if len(buf) - offset < 5:
        raise FormatError("truncated record header", offset)
    if bytes(buf[offset : offset + 4]) != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[offset:offset + 4])!r}, expected {MAGIC!r}", offset)
    rank = buf[offset + 4]
    if not 1 <= rank <= MAX_RANK:
        raise FormatError(f"rank {rank} outside 1..{MAX_RANK}", offset + 4)
    dims_at = offset + 5
    if len(buf) - dims_at < 4 * rank:
        raise FormatError("truncated dims", dims_at)
    dims = struct.unpack_from(f"<{rank}I", buf, dims_at)
    if any(d == 0 for d in dims):
        raise FormatError(f"zero-sized dim in {dims}", dims_at)
    payload_at = dims_at + 4 * rank
    nbytes = math.prod(dims) * 4
    if nbytes > len(buf) - payload_at:
        # Also covers dims whose product overflows any sane file size.
        raise FormatError(f"payload of dims {dims} needs {nbytes} bytes, {len(buf) - payload_at} remain", payload_at)
    payload = bytes(buf[payload_at : payload_at + nbytes])
    values = np.frombuffer(payload, dtype="<f4")
    if not np.isfinite(values).all():
        bad = int(np.flatnonzero(~np.isfinite(values))[0])
        raise FormatError("non-finite payload value", payload_at + 4 * bad)
    return TensorBlob(tuple(dims), payload), payload_at + nbytes


def read_trace(path: str | os.PathLike) -> list[TensorBlob]:
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_trace(data)


def parse_trace(data: bytes) -> list[TensorBlob]:
    buf = memoryview(data)
    if bytes(buf[:4]) == MAGIC:
        blob, end = _decode_record(buf, 0)
        if end != len(buf):
            raise FormatError("trailing bytes after single record", end)
        return [blob]
    if len(buf) < 4:
        raise FormatError("file too short for magic or record count", 0)
    (count,) = struct.unpack_from("<I", buf, 0)
    # A container must be empty or start its first record at offset 4.
    if not (count == 0 and len(buf) == 4) and bytes(buf[4:8]) != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r} or a record count", 0)
    blobs = []
    offset = 4
    for _ in range(count):
        blob, offset = _decode_record(buf, offset)
        blobs.append(blob)
    if offset != len(buf):
        raise FormatError(f"trailing bytes after {count} records", offset)
    return blobs


def blobs_from_arrays(arrays: Iterable[np.ndarray]) -> list[TensorBlob]:
    return [TensorBlob.from_array(a) for a in arrays]
