"""Queue-driven curation pipeline on a virtual clock.

Raw objects landing in the store are announced on the entry queue. Two
front-end stages (format conversion, metadata template) run with unbounded
concurrency, as serverless functions would; feature extraction runs on an
autoscaling worker pool whose busy and idle time is accounted for the cost
report. Delivery is at-least-once. Results become visible exactly once
because every write is either deterministic (conversion output) or a
compare-and-swap from the empty template to the completed record.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import codecs
from .codecs import CodecError
from .core import Channel, MediaFormat, SessionManifest, Zone, digest, parse_key
from .extractors import ExtractContext, ExtractorRegistry
from .queue import DurableQueue, QueueMessage
from .store import ObjectStore, is_raw_path

logger = logging.getLogger(__name__)

EMPTY, COMPUTED, FAILED = "empty", "computed", "failed"


class UnknownObjectError(KeyError):
    pass


class VirtualClock:
    def __init__(self, start: float = 0.0):
        self.t = start

    def now(self) -> float:
        return self.t


# feature records -----------------------------------------------------------


@dataclass
class FeatureRecord:
    item_key: str
    schema_version: int
    location: str
    media_format: str
    timestamp: int | None
    checksum: str
    features: dict[str, dict] = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return all(f["status"] != EMPTY for f in self.features.values())

    def to_dict(self) -> dict:
        return {
            "item_key": self.item_key,
            "schema_version": self.schema_version,
            "location": self.location,
            "media_format": self.media_format,
            "timestamp": self.timestamp,
            "checksum": self.checksum,
            "features": self.features,
        }

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_bytes(cls, data: bytes) -> "FeatureRecord":
        return cls(**json.loads(data))


@lru_cache(maxsize=1 << 18)
def record_path(item_key: str) -> str:
    return parse_key(item_key).in_zone(Zone.FEATURES).serialize()


# autoscaling ---------------------------------------------------------------


@dataclass
class PriceModel:
    cpu_per_hour: float = 0.20
    accelerated_per_hour: float = 1.20


@dataclass
class WorkerPool:
    min_workers: int = 0
    max_workers: int = 16
    target_backlog_per_worker: int = 50
    accelerated: bool = False
    current: int = 0
    busy_seconds: float = 0.0
    idle_seconds: float = 0.0
    log: list[tuple[float, int, int]] = field(default_factory=list)  # (t, depth, workers)

    def __post_init__(self):
        if not 0 <= self.min_workers <= self.max_workers or self.max_workers < 1:
            raise ValueError("need 0 <= min_workers <= max_workers and max_workers >= 1")
        if self.target_backlog_per_worker < 1:
            raise ValueError("target_backlog_per_worker must be >= 1")
        self.current = max(self.current, self.min_workers)


def autoscale(pool: WorkerPool, queue_depth: int, now: float = 0.0) -> int:
    """Worker count for a backlog: ceil(depth / target), clamped to the pool bounds."""
    want = math.ceil(max(0, queue_depth) / pool.target_backlog_per_worker)
    count = min(pool.max_workers, max(pool.min_workers, want))
    pool.log.append((now, queue_depth, count))
    return count


# fault plans ---------------------------------------------------------------


@dataclass(frozen=True)
class PipelineFaults:
    """Injected worker crashes.

    Each item is independently selected with probability ``crash_fraction``;
    a selected item crashes on its first ``max_crashes_per_item`` deliveries
    at every stage listed in ``stages``. A crash lands either before the
    result is committed or after it (before the message is acknowledged),
    chosen per item with probability ``post_commit_fraction``.
    """

    crash_fraction: float = 0.0
    max_crashes_per_item: int = 1
    stages: tuple[str, ...] = ("extract",)
    post_commit_fraction: float = 0.5
    seed: int = 0

    def _draw(self, item_key: str, salt: str) -> float:
        h = hashlib.sha256(f"{self.seed}/{salt}/{item_key}".encode()).digest()
        return int.from_bytes(h[:8], "big") / 2**64

    def crash(self, stage: str, item_key: str, delivery: int) -> str | None:
        """None, "pre" or "post" for this delivery."""
        if stage not in self.stages or delivery > self.max_crashes_per_item:
            return None
        if self._draw(item_key, "select") >= self.crash_fraction:
            return None
        return "post" if self._draw(item_key, "point") < self.post_commit_fraction else "pre"


# reports -------------------------------------------------------------------


@dataclass
class PipelineReport:
    items_in: int = 0
    completed: int = 0
    dead_lettered: int = 0
    dead_letters: list[dict] = field(default_factory=list)
    redeliveries: int = 0
    crashes: int = 0
    duplicate_commits: int = 0
    retries_absorbed: int = 0
    failed_features: int = 0
    worker_busy_s: float = 0.0
    worker_idle_s: float = 0.0
    frontend_s: float = 0.0
    elapsed_s: float = 0.0
    accelerated: bool = False
    simulated_cost: float = 0.0
    peak_workers: int = 0
    scaling_log: list[tuple[float, int, int]] = field(default_factory=list)

    @property
    def conserved(self) -> bool:
        return self.items_in == self.completed + self.dead_lettered

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conserved"] = self.conserved
        d["scaling_log"] = [list(e) for e in self.scaling_log]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


@dataclass
class _Worker:
    busy_until: float | None = None
    message: QueueMessage | None = None
    crash: str | None = None
    retiring: bool = False


# pipeline ------------------------------------------------------------------


class Pipeline:
    def __init__(
        self,
        store: ObjectStore,
        registry: ExtractorRegistry | None = None,
        *,
        pool: WorkerPool | None = None,
        visibility_timeout: float = 30.0,
        max_deliveries: int = 5,
        faults: PipelineFaults | None = None,
        scale_interval: float = 10.0,
        frontend_ms: float = 50.0,
        prices: PriceModel | None = None,
        subscribe: bool = True,
    ):
        self.store = store
        self.registry = registry if registry is not None else ExtractorRegistry.default()
        self.pool = pool or WorkerPool()
        self.faults = faults or PipelineFaults()
        self.scale_interval = scale_interval
        self.frontend_ms = frontend_ms
        self.prices = prices or PriceModel()
        self.clock = VirtualClock()
        qargs = dict(clock=self.clock.now, visibility_timeout=visibility_timeout, max_deliveries=max_deliveries)
        self.entry = DurableQueue("entry", **qargs)
        self.metadata = DurableQueue("metadata", **qargs)
        self.processing = DurableQueue("processing", **qargs)
        self._timestamps: dict[str, int] = {}
        self._indexed_sessions: set[str] = set()
        self._commits: Counter = Counter()
        self._completed: set[str] = set()
        self._crashes = 0
        self._absorbed = 0
        self._frontend_s = 0.0
        # last decoded frame per stream, so motion energy need not decode its predecessor again
        self._recent: dict[tuple, tuple[int, object]] = {}
        if subscribe:
            store.subscribe(self.on_object_created)

    # stage 0 ---------------------------------------------------------------

    def on_object_created(self, path: str) -> str | None:
        """Announce a raw object. Idempotent per key; returns the message id,
        or None if the key was already announced."""
        if not is_raw_path(path) or not self.store.exists(path):
            raise UnknownObjectError(path)
        return self.entry.send({"key": path}, dedup_key=path)

    # stage 1: format conversion ------------------------------------------------

    def _convert(self, msg: QueueMessage) -> str:
        path = msg.body["key"]
        key = parse_key(path)
        raw = self.store.get(path)
        kind = codecs.sniff(raw)
        if key.channel is Channel.VITALS:
            if kind != "vitals_csv":
                raise CodecError("vitals item is not CSV")
            out, fmt = raw, MediaFormat.VITALS_CSV
        elif kind == "tiff":
            out, fmt = codecs.encode_png(codecs.decode_tiff(raw)), MediaFormat.PNG
        elif kind == "wav":
            samples, rate = codecs.decode_wav(raw)
            out, fmt = codecs.encode_flac(samples, rate), MediaFormat.FLAC
        else:
            raise CodecError(f"{path}: unsupported raw format")
        converted = key.in_zone(Zone.CONVERTED).serialize()
        self.store.put(converted, out)  # temp file + atomic rename
        self.metadata.send({"key": path, "converted": converted, "format": fmt.value}, dedup_key=path)
        return converted

    def convert_format(self, msg: QueueMessage) -> str:
        converted = self._convert(msg)
        self.entry.delete(msg.receipt_handle)
        return converted

    # stage 2: metadata template ------------------------------------------------

    def _timestamp(self, path: str) -> int | None:
        key = parse_key(path)
        session = f"manifests/{key.study_id}/{key.subject_id}/{key.session_id}/"
        if session not in self._indexed_sessions:
            for mpath in self.store.keys(session):
                self._timestamps.update(SessionManifest.from_json(self.store.get(mpath).decode()).timestamps)
            self._indexed_sessions.add(session)
        return self._timestamps.get(path)

    def _template(self, msg: QueueMessage) -> FeatureRecord:
        path, converted = msg.body["key"], msg.body["converted"]
        key = parse_key(path)
        payload = self.store.get(converted)
        record = FeatureRecord(
            item_key=path,
            schema_version=self.registry.schema_version,
            location=converted,
            media_format=msg.body["format"],
            timestamp=self._timestamp(path),
            checksum=digest(payload),
            features={s.name: {"status": EMPTY, "value": None, "cost_ms": 0.0} for s in self.registry.for_channel(key.channel)},
        )
        rpath = record_path(path)
        if not self.store.put_if_absent(rpath, record.to_bytes()):
            existing = FeatureRecord.from_bytes(self.store.get(rpath))
            if existing.schema_version < record.schema_version:
                self.store.replace(rpath, record.to_bytes())
            else:
                record = existing
        self.processing.send({"key": path}, dedup_key=path)
        return record

    def generate_metadata(self, msg: QueueMessage) -> FeatureRecord:
        record = self._template(msg)
        self.metadata.delete(msg.receipt_handle)
        return record

    # stage 3: feature extraction -----------------------------------------------

    def _previous_frame(self, path: str):
        key = parse_key(path)
        if key.sequence == 0:
            return None
        recent = self._recent.get(key.stream)
        if recent is not None and recent[0] == key.sequence - 1:
            return recent[1]
        prev = replace(key, zone=Zone.CONVERTED, sequence=key.sequence - 1)
        for candidate in (prev.serialize(), prev.in_zone(Zone.RAW).serialize()):
            if self.store.exists(candidate):
                return codecs.decode_any(self.store.get(candidate))
        return None

    def pending_cost_ms(self, path: str) -> float:
        rpath = record_path(path)
        if not self.store.exists(rpath):
            return 0.0
        record = FeatureRecord.from_bytes(self.store.get(rpath))
        return sum(
            self.registry[name].cost_ms(self.pool.accelerated)
            for name, slot in record.features.items()
            if slot["status"] == EMPTY and name in self.registry
        )

    def _extract(self, msg: QueueMessage) -> FeatureRecord:
        path = msg.body["key"]
        rpath = record_path(path)
        current = self.store.get(rpath)
        record = FeatureRecord.from_bytes(current)
        if record.complete:
            self._completed.add(path)
            return record
        payload = self.store.get(record.location)
        if digest(payload) != record.checksum:
            raise CodecError(f"{record.location}: converted payload changed")
        data = codecs.decode_any(payload)
        key = parse_key(path)
        ctx = ExtractContext(sequence=key.sequence, previous=lambda: self._previous_frame(path))
        for name, slot in record.features.items():
            if slot["status"] != EMPTY:
                continue
            spec = self.registry[name]
            slot["cost_ms"] = spec.cost_ms(self.pool.accelerated)
            try:
                slot["value"] = spec.fn(data, ctx)
                slot["status"] = COMPUTED
            except Exception as exc:  # extractor bugs are recorded, not retried
                slot["status"] = FAILED
                slot["reason"] = f"{type(exc).__name__}: {exc}"
        self._recent[key.stream] = (key.sequence, data)
        if self.store.compare_and_swap(rpath, digest(current), record.to_bytes()):
            self._commits[rpath] += 1
        self._completed.add(path)
        return record

    def extract_features(self, msg: QueueMessage) -> FeatureRecord:
        record = self._extract(msg)
        self.processing.delete(msg.receipt_handle)
        return record

    # run loop ------------------------------------------------------------------

    def _frontend(self, queue: DurableQueue, stage: str, work) -> bool:
        did = False
        while True:
            batch = queue.receive(max_messages=256)
            if not batch:
                return did
            did = True
            for msg in batch:
                self._frontend_s += self.frontend_ms / 1000
                crash = self.faults.crash(stage, msg.body["key"], msg.delivery_count)
                if crash == "pre":
                    self._crashes += 1
                    continue
                try:
                    work(msg)
                except (CodecError, KeyError, ValueError) as exc:
                    queue.fail(msg.receipt_handle, f"{type(exc).__name__}: {exc}")
                    logger.info("%s failed for %s: %s", stage, msg.body["key"], exc)
                    continue
                if crash == "post":
                    self._crashes += 1
                    continue
                queue.delete(msg.receipt_handle)

    def run_until_drained(self, faults: PipelineFaults | None = None, max_virtual_s: float = 1e9) -> PipelineReport:
        if faults is not None:
            self.faults = faults
        pool = self.pool
        workers = [_Worker() for _ in range(pool.current)]
        next_scale = self.clock.t
        peak = len(workers)
        queues = (self.entry, self.metadata, self.processing)

        while True:
            while self._frontend(self.entry, "convert", self._convert) | self._frontend(
                self.metadata, "metadata", self._template
            ):
                pass

            if self.clock.t >= next_scale:
                target = autoscale(pool, self.processing.depth, self.clock.t)
                idle = [w for w in workers if w.message is None]
                while len(workers) < target:
                    workers.append(_Worker())
                excess = len(workers) - target
                for w in reversed(idle):
                    if excess <= 0:
                        break
                    workers.remove(w)
                    excess -= 1
                for w in workers:
                    w.retiring = False
                for w in [w for w in workers if w.message is not None][: max(0, excess)]:
                    w.retiring = True
                pool.current = len(workers)
                peak = max(peak, len(workers))
                next_scale += self.scale_interval

            for w in workers:
                if w.message is None and not w.retiring:
                    got = self.processing.receive(1)
                    if not got:
                        break
                    msg = got[0]
                    cost_s = self.pending_cost_ms(msg.body["key"]) / 1000
                    w.message = msg
                    w.crash = self.faults.crash("extract", msg.body["key"], msg.delivery_count)
                    w.busy_until = self.clock.t + (cost_s / 2 if w.crash == "pre" else cost_s)

            busy = [w for w in workers if w.message is not None]
            if not busy and all(len(q) == 0 for q in queues):
                # drained: release the pool down to its floor
                pool.current = autoscale(pool, 0, self.clock.t)
                break
            candidates = [w.busy_until for w in busy]
            for q in queues:
                nv = q.next_visible_at()
                if nv is not None and nv > self.clock.t:
                    candidates.append(nv)
            candidates.append(next_scale)
            t_next = max(self.clock.t, min(candidates))
            if t_next > max_virtual_s:
                raise RuntimeError("pipeline did not drain within the virtual time limit")

            span = t_next - self.clock.t
            pool.busy_seconds += span * len(busy)
            pool.idle_seconds += span * (len(workers) - len(busy))
            self.clock.t = t_next

            for w in busy:
                if w.busy_until <= self.clock.t:
                    self._finish(w)
            workers = [w for w in workers if not (w.retiring and w.message is None)]
            pool.current = len(workers)

        return self.report(peak)

    def _finish(self, w: _Worker) -> None:
        msg, crash = w.message, w.crash
        w.message, w.busy_until, w.crash = None, None, None
        if crash == "pre":
            self._crashes += 1
            return
        path = msg.body["key"]
        before = self._commits[record_path(path)]
        try:
            self._extract(msg)
        except (CodecError, KeyError, ValueError) as exc:
            self.processing.fail(msg.receipt_handle, f"{type(exc).__name__}: {exc}")
            return
        if self._commits[record_path(path)] == before and msg.delivery_count > 1:
            self._absorbed += 1
        if crash == "post":
            self._crashes += 1
            return
        self.processing.delete(msg.receipt_handle)

    def report(self, peak_workers: int = 0) -> PipelineReport:
        dead = [
            {"queue": q.name, "key": d.body.get("key"), "deliveries": d.delivery_count, "reason": d.reason}
            for q in (self.entry, self.metadata, self.processing)
            for d in q.dead_letter
        ]
        dead_keys = {d["key"] for d in dead}
        failed = 0
        for path in self._completed:
            record = FeatureRecord.from_bytes(self.store.get(record_path(path)))
            failed += sum(1 for f in record.features.values() if f["status"] == FAILED)
        price = self.prices.accelerated_per_hour if self.pool.accelerated else self.prices.cpu_per_hour
        return PipelineReport(
            items_in=self.entry.stats.sent,
            completed=len(self._completed),
            dead_lettered=len(dead_keys - self._completed),
            dead_letters=sorted(dead, key=lambda d: d["key"] or ""),
            redeliveries=sum(q.stats.redeliveries for q in (self.entry, self.metadata, self.processing)),
            crashes=self._crashes,
            duplicate_commits=sum(n - 1 for n in self._commits.values() if n > 1),
            retries_absorbed=self._absorbed,
            failed_features=failed,
            worker_busy_s=self.pool.busy_seconds,
            worker_idle_s=self.pool.idle_seconds,
            frontend_s=self._frontend_s,
            elapsed_s=self.clock.t,
            accelerated=self.pool.accelerated,
            simulated_cost=(self.pool.busy_seconds + self.pool.idle_seconds) / 3600 * price,
            peak_workers=peak_workers,
            scaling_log=list(self.pool.log),
        )


def load_record(store: ObjectStore, item_key: str) -> FeatureRecord:
    return FeatureRecord.from_bytes(store.get(record_path(item_key)))


def decode_item(store: ObjectStore, path: str) -> np.ndarray:
    return codecs.decode_any(store.get(path))
