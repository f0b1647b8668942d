"""Binary tensor dump format used by golden tests and checkpoints.

Layout (all integers little-endian):

    magic   4 bytes  b"CXTN"
    version 1 byte   (currently 1)
    rank    1 byte
    extents rank * uint64
    data    float32, row-major

Values are always stored as float32 regardless of in-memory precision.
"""

from __future__ import annotations

import io
import struct

import numpy as np

TENSOR_MAGIC = b"CXTN"
TENSOR_VERSION = 1


class FormatError(ValueError):
    """Malformed or incompatible binary payload."""


def write_tensor(stream, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim > 255:
        raise FormatError("rank exceeds format limit")
    stream.write(TENSOR_MAGIC)
    stream.write(struct.pack("<BB", TENSOR_VERSION, arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    stream.write(arr.tobytes())


def read_tensor(stream) -> np.ndarray:
    magic = stream.read(4)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    head = stream.read(2)
    if len(head) != 2:
        raise FormatError("truncated tensor header")
    version, rank = struct.unpack("<BB", head)
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor format version {version}")
    ext_raw = stream.read(8 * rank)
    if len(ext_raw) != 8 * rank:
        raise FormatError("truncated tensor extents")
    shape = struct.unpack(f"<{rank}Q", ext_raw)
    count = 1
    for e in shape:
        count *= e
    payload = stream.read(4 * count)
    if len(payload) != 4 * count:
        raise FormatError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def dump_tensor_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def load_tensor_bytes(blob: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(blob))


def write_named_tensors(stream, tensors: dict[str, np.ndarray]) -> None:
    """Count-prefixed sequence of (name, tensor) records, insertion order."""
    stream.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        blob = name.encode("utf-8")
        if len(blob) > 0xFFFF:
            raise FormatError("tensor name too long")
        stream.write(struct.pack("<H", len(blob)))
        stream.write(blob)
        write_tensor(stream, arr)


def read_named_tensors(stream) -> dict[str, np.ndarray]:
    raw = stream.read(4)
    if len(raw) != 4:
        raise FormatError("truncated tensor table")
    (count,) = struct.unpack("<I", raw)
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        nraw = stream.read(2)
        if len(nraw) != 2:
            raise FormatError("truncated tensor record")
        (nlen,) = struct.unpack("<H", nraw)
        name = stream.read(nlen).decode("utf-8")
        out[name] = read_tensor(stream)
    return out
