"""Datasets: staged appends, atomically published snapshots and pruned scans.

Directory layout of one dataset::

    <root>/<name>/schema.json
    <root>/<name>/staging.json          staged row groups not yet published
    <root>/<name>/groups/<sha256>.col   immutable, content-addressed row groups
    <root>/<name>/manifest-<N>.json     snapshot N, never rewritten

A snapshot becomes visible when its manifest file is renamed into place.
Anything else left behind by a crash (temp files, unreferenced groups) is
invisible to readers.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import tempfile
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .container import ColumnData, GroupReader, encode_group
from .predicate import Predicate, QueryError, bounds, evaluate, typecheck
from .schema import Schema, SchemaError

DEFAULT_GROUP_ROWS = 1000
_MANIFEST_RE = re.compile(r"^manifest-(\d+)\.json$")


class DatasetError(RuntimeError):
    pass


class PublishCrash(RuntimeError):
    """Raised by fault injection in the middle of a publish."""


def _write_atomic(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _dumps(obj) -> bytes:
    return (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode()


@dataclass(frozen=True)
class GroupRef:
    id: str
    rows: int


@dataclass(frozen=True)
class Snapshot:
    snapshot_id: int
    groups: tuple[GroupRef, ...]
    total_rows: int
    schema_version: int
    created_ms: int
    last_staged_seq: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["groups"] = [asdict(g) for g in self.groups]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Snapshot":
        return cls(
            snapshot_id=d["snapshot_id"],
            groups=tuple(GroupRef(**g) for g in d["groups"]),
            total_rows=d["total_rows"],
            schema_version=d["schema_version"],
            created_ms=d["created_ms"],
            last_staged_seq=d.get("last_staged_seq", 0),
        )


@dataclass
class AppendResult:
    staged: int = 0
    group_sizes: list[int] = field(default_factory=list)
    rejected: list[tuple[int, str]] = field(default_factory=list)


@dataclass
class ScanStats:
    groups_total: int = 0
    groups_read: int = 0
    groups_skipped: int = 0
    rows_scanned: int = 0
    rows_matched: int = 0
    bytes_read: int = 0


@dataclass
class ScanResult:
    rows: list[dict]
    stats: ScanStats

    def __iter__(self):
        return iter(self.rows)

    def __len__(self):
        return len(self.rows)


class Dataset:
    def __init__(self, root: Path, clock: Callable[[], int] | None = None):
        self.root = Path(root)
        self.name = self.root.name
        self.groups_dir = self.root / "groups"
        self.schema = Schema.from_dict(json.loads((self.root / "schema.json").read_text()))
        self.group_rows = json.loads((self.root / "schema.json").read_text()).get("group_rows", DEFAULT_GROUP_ROWS)
        self.clock = clock or (lambda: int(time.time() * 1000))
        self._lock = threading.Lock()

    # snapshots -------------------------------------------------------------

    def snapshot_ids(self) -> list[int]:
        ids = []
        for p in self.root.iterdir():
            m = _MANIFEST_RE.match(p.name)
            if m:
                ids.append(int(m.group(1)))
        return sorted(ids)

    @property
    def latest_id(self) -> int:
        ids = self.snapshot_ids()
        if not ids:
            raise DatasetError(f"dataset {self.name} has no snapshot")
        return ids[-1]

    def manifest_path(self, snapshot_id: int) -> Path:
        return self.root / f"manifest-{snapshot_id}.json"

    def snapshot(self, snapshot_id: int | None = None) -> Snapshot:
        sid = self.latest_id if snapshot_id is None else snapshot_id
        path = self.manifest_path(sid)
        if not path.exists():
            raise DatasetError(f"dataset {self.name} has no snapshot {sid}")
        return Snapshot.from_dict(json.loads(path.read_text()))

    def group_path(self, group_id: str) -> Path:
        return self.groups_dir / f"{group_id}.col"

    def digest(self, snapshot_id: int | None = None) -> str:
        """Digest of a snapshot's manifest and every row group it references."""
        snap = self.snapshot(snapshot_id)
        h = hashlib.sha256(self.manifest_path(snap.snapshot_id).read_bytes())
        for g in snap.groups:
            h.update(self.group_path(g.id).read_bytes())
        return h.hexdigest()

    # staging ---------------------------------------------------------------

    def _staging(self) -> dict:
        return json.loads((self.root / "staging.json").read_text())

    def staged(self) -> list[GroupRef]:
        last = self.snapshot().last_staged_seq
        return [GroupRef(e["id"], e["rows"]) for e in self._staging()["groups"] if e["seq"] > last]

    def append_rows(self, rows, group_rows: int | None = None) -> AppendResult:
        """Type-check and stage rows. Bad rows are reported, the rest staged
        in groups of at most ``group_rows``."""
        size = group_rows or self.group_rows
        result = AppendResult()
        good = []
        for i, row in enumerate(rows):
            try:
                good.append(self.schema.check_row(row))
            except SchemaError as exc:
                result.rejected.append((i, str(exc)))
        with self._lock:
            staging = self._staging()
            for start in range(0, len(good), size):
                chunk = good[start : start + size]
                data = encode_group(self.schema, chunk)
                gid = hashlib.sha256(data).hexdigest()
                target = self.group_path(gid)
                if not target.exists():
                    _write_atomic(target, data)
                staging["next_seq"] += 1
                staging["groups"].append({"id": gid, "rows": len(chunk), "seq": staging["next_seq"]})
                result.group_sizes.append(len(chunk))
                result.staged += len(chunk)
            _write_atomic(self.root / "staging.json", _dumps(staging))
        return result

    def publish(self, crash_at: str | None = None) -> Snapshot:
        """Commit staged groups as a new snapshot.

        ``crash_at`` injects a failure: ``"before_manifest"`` (nothing
        written), ``"before_rename"`` (temp manifest written, not renamed) or
        ``"after_rename"`` (snapshot committed, staging not yet cleared).
        """
        with self._lock:
            prev = self.snapshot()
            staging = self._staging()
            fresh = [e for e in staging["groups"] if e["seq"] > prev.last_staged_seq]
            groups = prev.groups + tuple(GroupRef(e["id"], e["rows"]) for e in fresh)
            snap = Snapshot(
                snapshot_id=prev.snapshot_id + 1,
                groups=groups,
                total_rows=sum(g.rows for g in groups),
                schema_version=self.schema.version,
                created_ms=int(self.clock()),
                last_staged_seq=max([prev.last_staged_seq] + [e["seq"] for e in fresh]),
            )
            if crash_at == "before_manifest":
                raise PublishCrash(crash_at)
            fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".tmp-manifest-")
            with os.fdopen(fd, "wb") as fh:
                fh.write(_dumps(snap.to_dict()))
                fh.flush()
                os.fsync(fh.fileno())
            if crash_at == "before_rename":
                raise PublishCrash(crash_at)
            target = self.manifest_path(snap.snapshot_id)
            if target.exists():
                os.unlink(tmp)
                raise DatasetError(f"snapshot {snap.snapshot_id} already exists")
            os.replace(tmp, target)
            if crash_at == "after_rename":
                raise PublishCrash(crash_at)
            staging["groups"] = [e for e in staging["groups"] if e["seq"] > snap.last_staged_seq]
            _write_atomic(self.root / "staging.json", _dumps(staging))
            return snap

    def recover(self) -> None:
        """Remove temp files left by an interrupted writer."""
        for p in list(self.root.glob(".tmp-*")) + list(self.groups_dir.glob(".tmp-*")):
            p.unlink()

    # reading ---------------------------------------------------------------

    def _check_columns(self, columns) -> list[str]:
        names = self.schema.names if columns is None else list(columns)
        for n in names:
            if n not in self.schema:
                raise QueryError(f"unknown column {n!r}")
        return names

    def iter_groups(
        self,
        snapshot: int | Snapshot | None = None,
        columns=None,
        predicate: Predicate | None = None,
        prune: bool = True,
        stats: ScanStats | None = None,
    ) -> Iterator[tuple[int, GroupRef, dict[str, ColumnData], np.ndarray]]:
        """Yield (index, group, decoded columns, match mask) per group read."""
        snap = snapshot if isinstance(snapshot, Snapshot) else self.snapshot(snapshot)
        names = self._check_columns(columns)
        typecheck(predicate, self.schema)
        needed = list(dict.fromkeys(names + sorted(predicate.columns() if predicate else ())))
        stats = stats if stats is not None else ScanStats()
        stats.groups_total += len(snap.groups)
        for index, g in enumerate(snap.groups):
            reader = GroupReader(self.group_path(g.id))
            if prune and predicate is not None:
                may, _ = bounds(predicate, {c: reader.stats(c) for c in predicate.columns()}, reader.num_rows)
                if not may:
                    stats.groups_skipped += 1
                    stats.bytes_read += reader.bytes_read
                    continue
            cols = {c: reader.column(c) for c in needed}
            mask = evaluate(predicate, cols, reader.num_rows)
            stats.groups_read += 1
            stats.rows_scanned += reader.num_rows
            stats.rows_matched += int(mask.sum())
            stats.bytes_read += reader.bytes_read
            yield index, g, cols, mask

    def scan(self, snapshot: int | None = None, columns=None, predicate: Predicate | None = None, prune: bool = True) -> ScanResult:
        names = self._check_columns(columns)
        stats = ScanStats()
        rows = []
        for _, _, cols, mask in self.iter_groups(snapshot, names, predicate, prune, stats):
            idx = np.flatnonzero(mask)
            values = [cols[n].take(idx) for n in names]
            rows.extend(dict(zip(names, r)) for r in zip(*values))
        return ScanResult(rows, stats)

    def count_by(self, group_column: str, filters: dict[str, Predicate | None], snapshot: int | None = None) -> list[tuple]:
        """Per distinct value of ``group_column`` (nulls excluded), the number
        of rows matching each filter, in filter order. Sorted by group value."""
        if group_column not in self.schema:
            raise QueryError(f"unknown column {group_column!r}")
        for p in filters.values():
            typecheck(p, self.schema)
        counts: dict[object, list[int]] = {}
        needed = sorted({group_column}.union(*(p.columns() for p in filters.values() if p is not None)))
        for _, _, cols, _ in self.iter_groups(snapshot, needed, None, prune=False):
            keys = cols[group_column]
            n = len(keys.nulls)
            masks = [evaluate(p, cols, n) for p in filters.values()]
            for i in range(n):
                if keys.nulls[i]:
                    continue
                k = keys.python(i)
                row = counts.setdefault(k, [0] * len(masks))
                for j, m in enumerate(masks):
                    row[j] += int(m[i])
        return [(k, *counts[k]) for k in sorted(counts)]


class Database:
    """A directory of datasets."""

    def __init__(self, root, clock: Callable[[], int] | None = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.clock = clock

    def names(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir() if (p / "schema.json").exists())

    def create_dataset(self, name: str, schema: Schema, group_rows: int = DEFAULT_GROUP_ROWS) -> Dataset:
        if not re.match(r"^[A-Za-z0-9][A-Za-z0-9_.-]*$", name):
            raise DatasetError(f"invalid dataset name {name!r}")
        if not isinstance(schema, Schema):
            schema = Schema(schema)
        if group_rows < 1:
            raise DatasetError("group_rows must be >= 1")
        root = self.root / name
        if (root / "schema.json").exists():
            raise DatasetError(f"dataset {name!r} already exists")
        (root / "groups").mkdir(parents=True, exist_ok=True)
        _write_atomic(root / "staging.json", _dumps({"next_seq": 0, "groups": []}))
        snap = Snapshot(0, (), 0, schema.version, int(self.clock()) if self.clock else 0)
        _write_atomic(root / "manifest-0.json", _dumps(snap.to_dict()))
        _write_atomic(root / "schema.json", _dumps(schema.to_dict() | {"group_rows": group_rows}))
        return Dataset(root, self.clock)

    def open(self, name: str) -> Dataset:
        root = self.root / name
        if not (root / "schema.json").exists():
            raise DatasetError(f"no dataset named {name!r}")
        return Dataset(root, self.clock)

    def __contains__(self, name) -> bool:
        return (self.root / name / "schema.json").exists()

