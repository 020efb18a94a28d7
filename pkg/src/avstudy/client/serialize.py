"""Deterministic byte encoding of stream units (rows and NGrams).

A unit is ``u32 header length | header (canonical JSON) | buffers``. The
header lists each field in key order with its kind; array and bytes fields
reference a slice of the buffer region. Equal units always encode to equal
bytes, which is what cache transparency is checked against.
"""

from __future__ import annotations

import json
import struct

import numpy as np

_LEN = struct.Struct("<I")


def _describe(row: dict, buffers: list[bytes], offset: list[int]) -> list:
    fields = []
    for key in sorted(row):
        v = row[key]
        if isinstance(v, np.ndarray):
            data = np.ascontiguousarray(v).tobytes()
            fields.append([key, "nd", v.dtype.str, list(v.shape), offset[0], len(data)])
        elif isinstance(v, (bytes, bytearray)):
            data = bytes(v)
            fields.append([key, "b", offset[0], len(data)])
        elif isinstance(v, tuple):
            fields.append([key, "t", list(v)])
            continue
        else:
            if isinstance(v, np.generic):
                v = v.item()
            fields.append([key, "v", v])
            continue
        buffers.append(data)
        offset[0] += len(data)
    return fields


def encode_unit(unit) -> bytes:
    buffers: list[bytes] = []
    offset = [0]
    if isinstance(unit, dict):
        header = {"row": _describe(unit, buffers, offset)}
    else:
        header = {"ngram": [_describe(r, buffers, offset) for r in unit]}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return _LEN.pack(len(head)) + head + b"".join(buffers)


def _restore(fields: list, body: memoryview) -> dict:
    row = {}
    for f in fields:
        key, kind = f[0], f[1]
        if kind == "nd":
            dtype, shape, off, n = f[2], f[3], f[4], f[5]
            row[key] = np.frombuffer(bytes(body[off : off + n]), dtype=np.dtype(dtype)).reshape(shape)
        elif kind == "b":
            row[key] = bytes(body[f[2] : f[2] + f[3]])
        elif kind == "t":
            row[key] = tuple(f[2])
        else:
            row[key] = f[2]
    return row


def decode_unit(data: bytes):
    (n,) = _LEN.unpack_from(data)
    header = json.loads(data[4 : 4 + n])
    body = memoryview(data)[4 + n :]
    if "row" in header:
        return _restore(header["row"], body)
    return tuple(_restore(fields, body) for fields in header["ngram"])
