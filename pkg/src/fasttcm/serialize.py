"""FTCM binary formats.

A single tensor::

    b"FTCM" | version u32 | rank u32 | extents u64 * rank | float64 payload

A container (checkpoints, text-embedding caches)::

    b"FTCK" | version u32 | meta_count u32 | (key str, value str) * meta_count
            | section_count u32 | section *

    section := name str | record_count u32 | (name str, tensor) * record_count
    str     := length u32 | UTF-8 bytes

All integers and floats are little-endian.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

TENSOR_MAGIC = b"FTCM"
CONTAINER_MAGIC = b"FTCK"
VERSION = 1


class FormatError(ValueError):
    pass


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    pos = fh.tell()
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated input at byte {pos}: wanted {n} bytes, got {len(buf)}")
    return buf


def _u32(fh: BinaryIO) -> int:
    return struct.unpack("<I", _read_exact(fh, 4))[0]


def _write_str(fh: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_str(fh: BinaryIO) -> str:
    return _read_exact(fh, _u32(fh)).decode("utf-8")


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.require(np.asarray(arr, dtype="<f8"), requirements="C")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<II", VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> np.ndarray:
    pos = fh.tell()
    magic = _read_exact(fh, 4)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r} at byte {pos}")
    version = _u32(fh)
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version} at byte {pos + 4}")
    rank = _u32(fh)
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    count = int(np.prod(shape)) if rank else 1
    payload = _read_exact(fh, 8 * count)
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def tensor_from_bytes(raw: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(raw))


def write_container(
    path: str | Path,
    sections: dict[str, dict[str, np.ndarray]],
    meta: dict[str, str] | None = None,
) -> None:
    meta = meta or {}
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        fh.write(struct.pack("<II", VERSION, len(meta)))
        for key, val in meta.items():
            _write_str(fh, key)
            _write_str(fh, val)
        fh.write(struct.pack("<I", len(sections)))
        for sname, records in sections.items():
            _write_str(fh, sname)
            fh.write(struct.pack("<I", len(records)))
            for rname, arr in records.items():
                _write_str(fh, rname)
                write_tensor(fh, arr)
    tmp.replace(path)


def read_container(path: str | Path) -> tuple[dict[str, dict[str, np.ndarray]], dict[str, str]]:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != CONTAINER_MAGIC:
            raise FormatError(f"bad container magic {magic!r} at byte 0 of {path}")
        version = _u32(fh)
        if version != VERSION:
            raise FormatError(f"unsupported container version {version} at byte 4")
        meta = {}
        for _ in range(_u32(fh)):
            key = _read_str(fh)
            meta[key] = _read_str(fh)
        sections: dict[str, dict[str, np.ndarray]] = {}
        for _ in range(_u32(fh)):
            sname = _read_str(fh)
            records = {}
            for _ in range(_u32(fh)):
                rname = _read_str(fh)
                records[rname] = read_tensor(fh)
            sections[sname] = records
        end = fh.tell()
        if fh.read(1):
            raise FormatError(f"unexpected trailing data at byte {end} of {path}")
    return sections, meta
