"""DTF: a small little-endian binary tensor container.

Layout of a file::

    record*            one per tensor
    name_table?        optional, must be last

    record     := b"DTF1" u8 dtype  u8 rank  u32[rank] dims  payload
    name_table := b"DTFN" u32 count  (u16 length, utf-8 bytes)[count]

dtype codes: 0 = f32, 1 = f64, 2 = u8.  Payload is row-major.  When a name
table is present its count must equal the number of records; without one,
tensors are named ``"0"``, ``"1"``, ...
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import DtfFormatError

MAGIC = b"DTF1"
NAMES_MAGIC = b"DTFN"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}
MAX_RANK = 4
# refuse headers describing more than 2**40 elements
MAX_ELEMENTS = 1 << 40


def encode(tensors: dict) -> bytes:
    parts = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in CODES:
            raise TypeError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        if not 1 <= arr.ndim <= MAX_RANK:
            raise ValueError(f"tensor {name!r}: rank {arr.ndim} outside 1..{MAX_RANK}")
        code = CODES[arr.dtype]
        parts.append(MAGIC + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    parts.append(NAMES_MAGIC + struct.pack("<I", len(tensors)))
    for name in tensors:
        raw = str(name).encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    return b"".join(parts)


def _need(buf, pos, n, what):
    if pos + n > len(buf):
        raise DtfFormatError(
            f"truncated {what}: expected {n} bytes, found {len(buf) - pos}", pos
        )


def decode(buf: bytes) -> dict:
    arrays, names = [], None
    pos = 0
    while pos < len(buf):
        _need(buf, pos, 4, "magic")
        magic = buf[pos : pos + 4]
        if magic == NAMES_MAGIC:
            names, pos = _read_names(buf, pos + 4)
            if pos != len(buf):
                raise DtfFormatError(f"{len(buf) - pos} trailing bytes after name table", pos)
            break
        if magic != MAGIC:
            raise DtfFormatError(f"bad magic {magic!r}", pos)
        _need(buf, pos + 4, 2, "record header")
        code, rank = buf[pos + 4], buf[pos + 5]
        if code not in DTYPES:
            raise DtfFormatError(f"unknown dtype code {code}", pos + 4)
        if not 1 <= rank <= MAX_RANK:
            raise DtfFormatError(f"rank {rank} outside 1..{MAX_RANK}", pos + 5)
        pos += 6
        _need(buf, pos, 4 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        count = 1
        for d in dims:
            count *= d
        if count == 0 or count > MAX_ELEMENTS:
            raise DtfFormatError(f"dims {list(dims)} describe {count} elements", pos)
        pos += 4 * rank
        dt = DTYPES[code]
        nbytes = count * dt.itemsize
        _need(buf, pos, nbytes, "payload")
        arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(dims)
        arrays.append(arr.astype(dt.newbyteorder("="), copy=True))
        pos += nbytes
    if names is None:
        names = [str(i) for i in range(len(arrays))]
    elif len(names) != len(arrays):
        raise DtfFormatError(f"name table lists {len(names)} names for {len(arrays)} tensors", len(buf))
    return dict(zip(names, arrays))


def _read_names(buf, pos):
    _need(buf, pos, 4, "name count")
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    names = []
    for _ in range(count):
        _need(buf, pos, 2, "name length")
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        _need(buf, pos, n, "name")
        try:
            names.append(buf[pos : pos + n].decode("utf-8"))
        except UnicodeDecodeError:
            raise DtfFormatError("name is not valid utf-8", pos) from None
        pos += n
    return names, pos


def atomic_write_bytes(path, data: bytes):
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dtf_write(path, tensors: dict):
    """Write named arrays (f32, f64 or u8; rank 1-4) atomically."""
    atomic_write_bytes(path, encode(tensors))


def dtf_read(path) -> dict:
    with open(path, "rb") as fh:
        return decode(fh.read())
