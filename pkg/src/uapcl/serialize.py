"""UFT1 tensor records and the JSON-header container files built on them.

A UFT1 record is ``b"UFT1"``, a little-endian u32 rank, ``rank`` little-endian
u64 dims, then the float64 little-endian payload in row-major order.  The
container files (features, clips, checkpoints) are one UTF-8 JSON line, a
newline, then UFT1 records back to back.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import MagicError, TruncatedError

MAGIC = b"UFT1"


def write_tensor(fh, arr) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedError(f"truncated {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh) -> np.ndarray:
    magic = fh.read(4)
    if len(magic) < 4:
        raise TruncatedError("truncated record header")
    if magic != MAGIC:
        raise MagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
    dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "dims"))
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = _read_exact(fh, 8 * count, "payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)


def tensor_bytes(arr) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def save_tensor(path, arr) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read_tensor(fh)
        if fh.read(1):
            raise TruncatedError(f"trailing bytes after record in {path}")
    return arr


def write_container(path, header: dict, arrays) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for arr in arrays:
            write_tensor(fh, arr)


def read_container(path):
    """Return ``(header, records)`` where records holds every UFT1 record."""
    with open(path, "rb") as fh:
        line = fh.readline()
        if not line.endswith(b"\n"):
            raise TruncatedError(f"missing manifest line in {path}")
        header = json.loads(line.decode("utf-8"))
        records = []
        while True:
            peek = fh.read(1)
            if not peek:
                break
            fh.seek(-1, io.SEEK_CUR)
            records.append(read_tensor(fh))
    return header, records
