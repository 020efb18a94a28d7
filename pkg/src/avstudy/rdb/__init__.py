"""Columnar research database over immutable row-group files."""

from .container import ColumnData, ContainerError, GroupReader, encode_group
from .dataset import (
    DEFAULT_GROUP_ROWS,
    AppendResult,
    Database,
    Dataset,
    DatasetError,
    PublishCrash,
    ScanResult,
    ScanStats,
    Snapshot,
)
from .predicate import And, Compare, Not, Or, Predicate, QueryError, matches, parse
from .schema import Column, ColumnType, Schema, SchemaError

__all__ = [
    "And",
    "AppendResult",
    "Column",
    "ColumnData",
    "ColumnType",
    "Compare",
    "ContainerError",
    "DEFAULT_GROUP_ROWS",
    "Database",
    "Dataset",
    "DatasetError",
    "GroupReader",
    "Not",
    "Or",
    "Predicate",
    "PublishCrash",
    "QueryError",
    "ScanResult",
    "ScanStats",
    "Schema",
    "SchemaError",
    "Snapshot",
    "encode_group",
    "matches",
    "parse",
]
