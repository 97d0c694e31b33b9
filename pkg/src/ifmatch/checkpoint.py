"""Flat binary checkpoint container.

Layout: header magic ``IFM1``, then one record per entry:
name length (u32 LE), UTF-8 name, rank (u32 LE), extents (u32 LE each),
float64 values (LE).  Entries are written in sorted name order so the
file bytes are a pure function of the contents.
"""

import struct

import numpy as np

from .errors import DataError

MAGIC = b"IFM1"


def write_container(path: str, entries: dict):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name in sorted(entries):
            arr = np.asarray(entries[name], dtype=np.float64)
            if arr.ndim > 4:
                raise DataError(f"entry {name!r} has rank {arr.ndim} > 4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            for e in arr.shape:
                fh.write(struct.pack("<I", e))
            fh.write(arr.astype("<f8").tobytes())


def read_container(path: str) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise DataError(
            f"{path}: bad magic, expected {MAGIC!r}, found {data[:4]!r}"
        )
    entries = {}
    off = 4
    total = len(data)

    def take(n, what):
        nonlocal off
        if off + n > total:
            raise DataError(f"{path}: truncated reading {what}")
        buf = data[off : off + n]
        off += n
        return buf

    while off < total:
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        if rank > 4:
            raise DataError(f"{path}: entry {name!r} has rank {rank} > 4")
        extents = [struct.unpack("<I", take(4, "extent"))[0] for _ in range(rank)]
        count = 1
        for e in extents:
            count *= e
        raw = take(count * 8, f"values of {name!r}")
        arr = np.frombuffer(raw, dtype="<f8").reshape(extents).copy()
        entries[name] = arr
    return entries
