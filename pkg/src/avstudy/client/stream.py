"""Streaming reader over a dataset snapshot.

Stages run in this order: scan (with pruning) and decode per row group on a
prefetch pool, transforms per row, NGram windowing, local cache, buffered
shuffle. Row groups are re-sequenced after the pool, so without shuffle the
output order is the snapshot's row order no matter how many workers run.
"""

from __future__ import annotations

import hashlib
import json
import random
import shutil
import struct
import tempfile
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .. import codecs
from ..rdb import Database, Dataset, Predicate, parse
from ..rdb.predicate import typecheck
from .serialize import decode_unit, encode_unit
from .transforms import REGISTRY, TransformRegistry

SHARD_UNITS = 256
_U64 = struct.Struct("<Q")


class StreamError(ValueError):
    pass


@dataclass(frozen=True)
class ShuffleSpec:
    seed: int
    buffer_rows: int = 1000

    def __post_init__(self):
        if self.buffer_rows < 1:
            raise StreamError("shuffle buffer_rows must be >= 1")


@dataclass(frozen=True)
class NGramSpec:
    n: int
    group_column: str
    order_column: str
    max_gap: float | None = None  # None: any jump in order_column is allowed

    def __post_init__(self):
        if self.n < 1:
            raise StreamError("ngram n must be >= 1")


@dataclass(frozen=True)
class CacheSpec:
    directory: str
    enabled: bool = True


@dataclass
class StreamSpec:
    dataset: str
    snapshot: int | None = None
    columns: list[str] | None = None
    predicate: str | None = None
    transforms: list = field(default_factory=list)
    shuffle: ShuffleSpec | None = None
    ngram: NGramSpec | None = None
    cache: CacheSpec | None = None
    prefetch_workers: int = 1
    decode: bool = True

    def __post_init__(self):
        if self.prefetch_workers < 1:
            raise StreamError("prefetch_workers must be a positive integer")
        if isinstance(self.shuffle, dict):
            self.shuffle = ShuffleSpec(**self.shuffle)
        if isinstance(self.ngram, dict):
            self.ngram = NGramSpec(**self.ngram)
        if isinstance(self.cache, dict):
            self.cache = CacheSpec(**self.cache)

    def parsed_predicate(self) -> Predicate | None:
        return parse(self.predicate) if self.predicate else None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StreamSpec":
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "StreamSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class StageTimes:
    read_s: float = 0.0
    decode_s: float = 0.0
    transform_s: float = 0.0
    ngram_s: float = 0.0
    cache_s: float = 0.0
    shuffle_s: float = 0.0


# building blocks -------------------------------------------------------------


def make_ngrams(rows: Iterable[dict], n: int, group_column: str, order_column: str, max_gap=None) -> Iterator[tuple]:
    """Sliding windows of ``n`` rows, stride 1, within one group value.

    Rows are bucketed by group and sorted by ``order_column``; groups are
    emitted in sorted order. A window is dropped if two neighbours in it are
    more than ``max_gap`` apart."""
    if n < 1:
        raise StreamError("ngram n must be >= 1")
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[group_column], []).append(r)
    for key in sorted(groups, key=lambda k: (k is None, k)):
        seq = sorted(groups[key], key=lambda r: r[order_column])
        for i in range(len(seq) - n + 1):
            window = seq[i : i + n]
            if max_gap is not None and any(
                window[j + 1][order_column] - window[j][order_column] > max_gap for j in range(n - 1)
            ):
                continue
            yield tuple(window)


def buffered_shuffle(units: Iterable, seed: int, buffer_rows: int) -> Iterator:
    """Seeded buffered shuffle (algorithm documented in docs/formats.md).

    Fill a buffer; once it holds ``buffer_rows`` units, each arrival triggers
    one draw: pick index j uniformly with ``random.Random(seed).randrange``,
    swap it with the last slot and pop. At end of input keep drawing until
    the buffer is empty."""
    rng = random.Random(seed)
    buf = []
    for u in units:
        buf.append(u)
        if len(buf) >= buffer_rows:
            j = rng.randrange(len(buf))
            buf[j], buf[-1] = buf[-1], buf[j]
            yield buf.pop()
    while buf:
        j = rng.randrange(len(buf))
        buf[j], buf[-1] = buf[-1], buf[j]
        yield buf.pop()


def decode_payload(value):
    """Decode a media payload to an array; other bytes pass through."""
    if isinstance(value, bytes) and codecs.sniff(value) in ("png", "tiff", "flac", "wav"):
        return codecs.decode_any(value)
    return value


# the stream ----------------------------------------------------------------


class Stream:
    """Iterator over a pinned snapshot. Each ``iter()`` is one full pass."""

    def __init__(self, db: Database, spec: StreamSpec, registry: TransformRegistry | None = None):
        self.spec = spec
        self.registry = registry or REGISTRY
        self.dataset: Dataset = db.open(spec.dataset)
        self.snapshot = self.dataset.snapshot(spec.snapshot)  # pinned for the stream's lifetime
        self.predicate = spec.parsed_predicate()
        typecheck(self.predicate, self.dataset.schema)
        self.columns = spec.columns or self.dataset.schema.names
        self.dataset._check_columns(self.columns)
        self.chain = self.registry.check(spec.transforms)
        if spec.ngram is not None:
            for c in (spec.ngram.group_column, spec.ngram.order_column):
                if c not in self.columns:
                    raise StreamError(f"ngram column {c!r} is not selected")
        self.times = StageTimes()
        self.cache_hit: bool | None = None
        self._tlock = threading.Lock()

    # fingerprint & cache -----------------------------------------------------

    @property
    def fingerprint(self) -> str:
        ident = {
            "dataset": self.spec.dataset,
            "snapshot": self.snapshot.snapshot_id,
            "columns": list(self.columns),
            "predicate": str(self.predicate) if self.predicate else None,
            "transforms": [[n, kw] for n, kw in self.chain],
            "ngram": asdict(self.spec.ngram) if self.spec.ngram else None,
            "decode": self.spec.decode,
        }
        return hashlib.sha256(json.dumps(ident, sort_keys=True, default=list).encode()).hexdigest()[:32]

    def _cache_dir(self) -> Path | None:
        c = self.spec.cache
        return Path(c.directory) / self.fingerprint if c and c.enabled else None

    def _cached_units(self) -> list[bytes] | None:
        """All cached units, or None if the cache is missing or fails a digest."""
        root = self._cache_dir()
        index_file = root / "index.json" if root else None
        if index_file is None or not index_file.exists():
            return None
        try:
            index = json.loads(index_file.read_text())
            if index.get("fingerprint") != self.fingerprint:
                return None
            blobs = []
            for shard in index["shards"]:
                data = (root / shard["file"]).read_bytes()
                if hashlib.sha256(data).hexdigest() != shard["sha256"]:
                    return None
                blobs.append(data)
        except (OSError, ValueError, KeyError):
            return None
        units = []
        for data in blobs:
            pos = 0
            while pos < len(data):
                (n,) = _U64.unpack_from(data, pos)
                units.append(data[pos + 8 : pos + 8 + n])
                pos += 8 + n
        if len(units) != index["units"]:
            return None
        return units

    def _write_cache(self, encoded: list[bytes]) -> None:
        root = self._cache_dir()
        root.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(dir=root.parent, prefix=".tmp-"))
        shards = []
        for i in range(0, max(len(encoded), 1), SHARD_UNITS):
            chunk = encoded[i : i + SHARD_UNITS]
            data = b"".join(_U64.pack(len(u)) + u for u in chunk)
            name = f"shard-{i // SHARD_UNITS:05d}.bin"
            (tmp / name).write_bytes(data)
            shards.append({"file": name, "sha256": hashlib.sha256(data).hexdigest(), "units": len(chunk)})
        index = {"fingerprint": self.fingerprint, "units": len(encoded), "shards": shards}
        (tmp / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
        if root.exists():
            shutil.rmtree(root)
        tmp.rename(root)

    # production ------------------------------------------------------------

    def _timed(self, stage: str, t0: float) -> None:
        with self._tlock:
            setattr(self.times, stage, getattr(self.times, stage) + time.perf_counter() - t0)

    def _process_group(self, item) -> list[dict]:
        _, _, cols, mask = item
        t0 = time.perf_counter()
        idx = mask.nonzero()[0]
        values = []
        for name in self.columns:
            vals = cols[name].take(idx)
            values.append([decode_payload(v) for v in vals] if self.spec.decode else vals)
        rows = [dict(zip(self.columns, r)) for r in zip(*values)]
        self._timed("decode_s", t0)
        if self.chain:
            t0 = time.perf_counter()
            rows = [self.registry.apply(r, self.chain) for r in rows]
            self._timed("transform_s", t0)
        return rows

    def _groups(self) -> Iterator:
        it = self.dataset.iter_groups(self.snapshot, self.columns, self.predicate)
        while True:
            t0 = time.perf_counter()
            try:
                item = next(it)
            except StopIteration:
                return
            finally:
                self._timed("read_s", t0)
            yield item

    def _rows(self) -> Iterator[dict]:
        workers = self.spec.prefetch_workers
        if workers == 1:
            for item in self._groups():
                yield from self._process_group(item)
            return
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pending: deque = deque()
            for item in self._groups():
                pending.append(pool.submit(self._process_group, item))
                while len(pending) >= 2 * workers:
                    yield from pending.popleft().result()
            while pending:
                yield from pending.popleft().result()

    def _units(self) -> Iterator:
        rows = self._rows()
        ng = self.spec.ngram
        if ng is None:
            yield from rows
            return
        t0 = time.perf_counter()
        windows = list(make_ngrams(rows, ng.n, ng.group_column, ng.order_column, ng.max_gap))
        self._timed("ngram_s", t0)
        yield from windows

    def _cached_or_fresh(self) -> Iterator:
        if self._cache_dir() is None:
            self.cache_hit = None
            yield from self._units()
            return
        t0 = time.perf_counter()
        cached = self._cached_units()
        self._timed("cache_s", t0)
        if cached is not None:
            self.cache_hit = True
            for blob in cached:
                yield decode_unit(blob)
            return
        self.cache_hit = False
        encoded = []
        for unit in self._units():
            t0 = time.perf_counter()
            blob = encode_unit(unit)
            encoded.append(blob)
            self._timed("cache_s", t0)
            # hand out the decoded copy so a cached and a fresh pass yield identical objects
            yield decode_unit(blob)
        t0 = time.perf_counter()
        self._write_cache(encoded)
        self._timed("cache_s", t0)

    def __iter__(self) -> Iterator:
        units = self._cached_or_fresh()
        sh = self.spec.shuffle
        if sh is None:
            yield from units
            return
        yield from buffered_shuffle(units, sh.seed, sh.buffer_rows)


def open_stream(db: Database, spec: StreamSpec, registry: TransformRegistry | None = None) -> Stream:
    return Stream(db, spec, registry)


def cached_stream(db: Database, spec: StreamSpec, registry: TransformRegistry | None = None) -> Stream:
    if spec.cache is None or not spec.cache.enabled:
        raise StreamError("cached_stream needs an enabled cache in the spec")
    return Stream(db, spec, registry)


# benchmarking --------------------------------------------------------------


@dataclass
class PassReport:
    units: int
    rows: int
    payload_bytes: int
    seconds: float
    rows_per_s: float
    bytes_per_s: float
    cache_hit: bool | None
    transform_invocations: int
    stages: dict


@dataclass
class ThroughputReport:
    dataset: str
    snapshot: int
    prefetch_workers: int
    passes: list[PassReport]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def _unit_stats(unit) -> tuple[int, int]:
    rows = [unit] if isinstance(unit, dict) else list(unit)
    nbytes = 0
    for r in rows:
        for v in r.values():
            if hasattr(v, "nbytes"):
                nbytes += v.nbytes
            elif isinstance(v, bytes):
                nbytes += len(v)
    return len(rows), nbytes


def bench_stream(db: Database, spec: StreamSpec, passes: int = 2, registry: TransformRegistry | None = None) -> ThroughputReport:
    registry = registry or REGISTRY
    stream = Stream(db, spec, registry)
    reports = []
    for _ in range(passes):
        stream.times = StageTimes()
        before = registry.total_invocations
        units = rows = nbytes = 0
        t0 = time.perf_counter()
        for unit in stream:
            r, b = _unit_stats(unit)
            units += 1
            rows += r
            nbytes += b
        dt = max(time.perf_counter() - t0, 1e-9)
        reports.append(
            PassReport(
                units=units,
                rows=rows,
                payload_bytes=nbytes,
                seconds=dt,
                rows_per_s=rows / dt,
                bytes_per_s=nbytes / dt,
                cache_hit=stream.cache_hit,
                transform_invocations=registry.total_invocations - before,
                stages=asdict(stream.times),
            )
        )
    return ThroughputReport(spec.dataset, stream.snapshot.snapshot_id, spec.prefetch_workers, reports)
