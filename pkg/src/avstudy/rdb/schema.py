"""Column types, schemas and row validation."""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass

from ..core import is_pii_name

INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1
INT64_MIN, INT64_MAX = -(2**63), 2**63 - 1


# column names must be usable as identifiers in filter expressions
_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
RESERVED_WORDS = frozenset({"and", "or", "not", "true", "false"})


class SchemaError(ValueError):
    pass


class ColumnType(str, enum.Enum):
    INT64 = "int64"
    FLOAT64 = "float64"
    STRING = "string"
    BYTES = "bytes"
    TIMESTAMP = "timestamp"  # int64 ms since the epoch, UTC
    BOX4 = "box4"  # (x, y, w, h) as int32
    BOOL = "bool"


# types with a total order, usable in comparisons and min/max statistics
ORDERED_TYPES = frozenset({ColumnType.INT64, ColumnType.FLOAT64, ColumnType.STRING, ColumnType.TIMESTAMP, ColumnType.BOOL})


@dataclass(frozen=True)
class Column:
    name: str
    type: ColumnType
    binary: bool = False

    def __post_init__(self):
        object.__setattr__(self, "type", ColumnType(self.type))
        if self.binary and self.type is not ColumnType.BYTES:
            raise SchemaError(f"{self.name}: only bytes columns can be binary payloads")

    def to_dict(self) -> dict:
        return {"name": self.name, "type": self.type.value, "binary": self.binary}


class Schema:
    def __init__(self, columns, version: int = 1):
        cols = []
        for c in columns:
            if isinstance(c, Column):
                cols.append(c)
            elif isinstance(c, dict):
                cols.append(Column(c["name"], c["type"], c.get("binary", False)))
            else:
                name, ctype = c[0], c[1]
                cols.append(Column(name, ctype, ColumnType(ctype) is ColumnType.BYTES))
        seen = set()
        for c in cols:
            if not _NAME_RE.match(c.name) or c.name.lower() in RESERVED_WORDS:
                raise SchemaError(f"invalid column name {c.name!r}")
            if c.name in seen:
                raise SchemaError(f"duplicate column {c.name!r}")
            if is_pii_name(c.name):
                raise SchemaError(f"column {c.name!r} is in the PII namespace")
            seen.add(c.name)
        self.columns: tuple[Column, ...] = tuple(cols)
        self.version = version
        self._by_name = {c.name: c for c in cols}

    def __contains__(self, name) -> bool:
        return name in self._by_name

    def __getitem__(self, name: str) -> Column:
        try:
            return self._by_name[name]
        except KeyError:
            raise SchemaError(f"unknown column {name!r}") from None

    def __iter__(self):
        return iter(self.columns)

    def __eq__(self, other) -> bool:
        return isinstance(other, Schema) and self.to_dict() == other.to_dict()

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def to_dict(self) -> dict:
        return {"version": self.version, "columns": [c.to_dict() for c in self.columns]}

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        return cls(d["columns"], version=d.get("version", 1))

    def check_row(self, row: dict) -> dict:
        """Return the row normalized to schema order, or raise SchemaError.
        Missing columns are null."""
        extra = set(row) - set(self._by_name)
        if extra:
            raise SchemaError(f"unknown columns {sorted(extra)}")
        return {c.name: check_value(c, row.get(c.name)) for c in self.columns}


def check_value(col: Column, v):
    if v is None:
        return None
    t = col.type
    if t in (ColumnType.INT64, ColumnType.TIMESTAMP):
        if isinstance(v, bool) or not isinstance(v, int):
            raise SchemaError(f"{col.name}: expected {t.value}, got {type(v).__name__}")
        if not INT64_MIN <= v <= INT64_MAX:
            raise SchemaError(f"{col.name}: {v} out of int64 range")
        return int(v)
    if t is ColumnType.FLOAT64:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise SchemaError(f"{col.name}: expected float64, got {type(v).__name__}")
        v = float(v)
        if math.isnan(v):
            raise SchemaError(f"{col.name}: NaN is not storable, use null")
        return v
    if t is ColumnType.STRING:
        if not isinstance(v, str):
            raise SchemaError(f"{col.name}: expected string, got {type(v).__name__}")
        return v
    if t is ColumnType.BYTES:
        if not isinstance(v, (bytes, bytearray, memoryview)):
            raise SchemaError(f"{col.name}: expected bytes, got {type(v).__name__}")
        return bytes(v)
    if t is ColumnType.BOOL:
        if not isinstance(v, bool):
            raise SchemaError(f"{col.name}: expected bool, got {type(v).__name__}")
        return v
    if t is ColumnType.BOX4:
        try:
            box = tuple(v)
        except TypeError:
            raise SchemaError(f"{col.name}: expected 4 ints") from None
        if len(box) != 4 or any(isinstance(x, bool) or not isinstance(x, int) for x in box):
            raise SchemaError(f"{col.name}: expected 4 ints, got {v!r}")
        if any(not INT32_MIN <= x <= INT32_MAX for x in box):
            raise SchemaError(f"{col.name}: box component out of int32 range")
        return tuple(int(x) for x in box)
    raise SchemaError(f"{col.name}: unsupported type {t}")
