"""Row-group container: one file per row group, columns stored contiguously.

Layout (all integers little-endian; see docs/formats.md for the full field
list)::

    "RDBC" u16 version u16 flags
    column chunk 0 .. column chunk k-1
    footer (UTF-8 JSON)
    u32 footer length
    "RDBC"

Each column chunk is a null bitmap followed by the value region, which may
be zlib-compressed. The footer carries the schema, chunk offsets and exact
per-column statistics, so pruning decisions need only the file tail.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .schema import ORDERED_TYPES, Column, ColumnType, Schema

MAGIC = b"RDBC"
VERSION = 1
HEADER = struct.Struct("<4sHH")
TRAILER = struct.Struct("<I4s")


class ContainerError(ValueError):
    pass


@dataclass
class ColumnData:
    """Decoded column: ``values`` has one entry per row (null slots hold a
    filler), ``nulls`` is a boolean mask."""

    column: Column
    values: np.ndarray
    nulls: np.ndarray

    def python(self, i: int):
        if self.nulls[i]:
            return None
        v = self.values[i]
        t = self.column.type
        if t in (ColumnType.INT64, ColumnType.TIMESTAMP):
            return int(v)
        if t is ColumnType.FLOAT64:
            return float(v)
        if t is ColumnType.BOOL:
            return bool(v)
        if t is ColumnType.BOX4:
            return tuple(int(x) for x in v)
        return v

    def to_list(self) -> list:
        return self.take(np.arange(len(self.nulls)))

    def take(self, idx: np.ndarray) -> list:
        """Python values at ``idx``, converted in bulk."""
        t = self.column.type
        vals = self.values[idx]
        if t is ColumnType.BOX4:
            out = [tuple(v) for v in vals.tolist()]
        else:
            out = vals.tolist()  # numpy scalars become int / float / bool
        nulls = self.nulls[idx]
        if nulls.any():
            for i in np.flatnonzero(nulls):
                out[i] = None
        return out


def _stats(col: Column, values: list) -> dict:
    present = [v for v in values if v is not None]
    lo = hi = None
    if present and col.type in ORDERED_TYPES:
        lo, hi = min(present), max(present)
    return {"min": lo, "max": hi, "null_count": len(values) - len(present)}


def _encode_values(col: Column, values: list) -> bytes:
    t = col.type
    if t in (ColumnType.INT64, ColumnType.TIMESTAMP):
        return np.array([0 if v is None else v for v in values], dtype="<i8").tobytes()
    if t is ColumnType.FLOAT64:
        return np.array([0.0 if v is None else v for v in values], dtype="<f8").tobytes()
    if t is ColumnType.BOOL:
        return bytes(1 if v else 0 for v in values)
    if t is ColumnType.BOX4:
        return np.array([(0, 0, 0, 0) if v is None else v for v in values], dtype="<i4").reshape(-1, 4).tobytes()
    blobs = [b"" if v is None else (v.encode() if t is ColumnType.STRING else v) for v in values]
    offsets = np.zeros(len(blobs) + 1, dtype="<u8")
    if blobs:
        offsets[1:] = np.cumsum([len(b) for b in blobs])
    return offsets.tobytes() + b"".join(blobs)


def _decode_values(col: Column, buf: bytes, n: int) -> np.ndarray:
    t = col.type
    if t in (ColumnType.INT64, ColumnType.TIMESTAMP):
        return np.frombuffer(buf, dtype="<i8", count=n).astype(np.int64)
    if t is ColumnType.FLOAT64:
        return np.frombuffer(buf, dtype="<f8", count=n).astype(np.float64)
    if t is ColumnType.BOOL:
        return np.frombuffer(buf, dtype=np.uint8, count=n).astype(bool)
    if t is ColumnType.BOX4:
        return np.frombuffer(buf, dtype="<i4", count=4 * n).reshape(n, 4).astype(np.int32)
    offsets = np.frombuffer(buf, dtype="<u8", count=n + 1)
    data = memoryview(buf)[8 * (n + 1) :]
    out = np.empty(n, dtype=object)
    for i in range(n):
        chunk = bytes(data[offsets[i] : offsets[i + 1]])
        out[i] = chunk.decode() if t is ColumnType.STRING else chunk
    return out


def encode_group(schema: Schema, rows: list[dict], compress: bool = True) -> bytes:
    """Serialize schema-checked rows into one container file."""
    n = len(rows)
    out = bytearray(HEADER.pack(MAGIC, VERSION, 0))
    columns = []
    for col in schema:
        values = [r[col.name] for r in rows]
        bitmap = np.packbits(np.array([v is None for v in values], dtype=bool), bitorder="little").tobytes()
        raw = _encode_values(col, values)
        codec, stored = "none", raw
        if compress:
            packed = zlib.compress(raw, 6)
            if len(packed) < len(raw):
                codec, stored = "zlib", packed
        stats = _stats(col, values)
        columns.append(
            {
                "name": col.name,
                "offset": len(out),
                "bitmap_length": len(bitmap),
                "codec": codec,
                "stored_length": len(stored),
                "raw_length": len(raw),
                "stats": stats,
            }
        )
        out += bitmap + stored
    footer = json.dumps(
        {"version": VERSION, "num_rows": n, "schema": schema.to_dict(), "columns": columns},
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
    ).encode()
    out += footer + TRAILER.pack(len(footer), MAGIC)
    return bytes(out)


class GroupReader:
    """Reads a container lazily: the footer on open, column chunks on demand."""

    def __init__(self, path):
        self.path = path
        self.bytes_read = 0
        with open(path, "rb") as fh:
            head = fh.read(HEADER.size)
            self.bytes_read += len(head)
            if len(head) < HEADER.size:
                raise ContainerError(f"{path}: truncated header")
            magic, version, _flags = HEADER.unpack(head)
            if magic != MAGIC or version != VERSION:
                raise ContainerError(f"{path}: not an RDBC v{VERSION} file")
            fh.seek(0, 2)
            size = fh.tell()
            if size < HEADER.size + TRAILER.size:
                raise ContainerError(f"{path}: truncated")
            fh.seek(size - TRAILER.size)
            flen, magic = TRAILER.unpack(fh.read(TRAILER.size))
            if magic != MAGIC or flen > size - HEADER.size - TRAILER.size:
                raise ContainerError(f"{path}: bad trailer")
            fh.seek(size - TRAILER.size - flen)
            footer = fh.read(flen)
            self.bytes_read += TRAILER.size + flen
        meta = json.loads(footer)
        self.num_rows: int = meta["num_rows"]
        self.schema = Schema.from_dict(meta["schema"])
        self.chunks = {c["name"]: c for c in meta["columns"]}

    def stats(self, name: str) -> dict:
        s = dict(self.chunks[name]["stats"])
        return s

    def column(self, name: str) -> ColumnData:
        col = self.schema[name]
        meta = self.chunks[name]
        with open(self.path, "rb") as fh:
            fh.seek(meta["offset"])
            blob = fh.read(meta["bitmap_length"] + meta["stored_length"])
        self.bytes_read += len(blob)
        if len(blob) != meta["bitmap_length"] + meta["stored_length"]:
            raise ContainerError(f"{self.path}: column {name} truncated")
        n = self.num_rows
        nulls = np.unpackbits(np.frombuffer(blob[: meta["bitmap_length"]], dtype=np.uint8), count=n, bitorder="little").astype(bool)
        stored = blob[meta["bitmap_length"] :]
        raw = zlib.decompress(stored) if meta["codec"] == "zlib" else stored
        if len(raw) != meta["raw_length"]:
            raise ContainerError(f"{self.path}: column {name} length mismatch")
        return ColumnData(col, _decode_values(col, raw, n), nulls)
