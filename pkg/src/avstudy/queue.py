"""At-least-once message queue with visibility timeouts and a dead-letter sink.

Time comes from an injected clock so the pipeline can run on virtual time.
"""

from __future__ import annotations

import heapq
import itertools
import threading
from dataclasses import dataclass
from typing import Callable


@dataclass(frozen=True)
class QueueMessage:
    message_id: str
    body: dict
    receipt_handle: str
    delivery_count: int
    visible_at: float  # visibility deadline of this delivery


@dataclass
class _Entry:
    message_id: str
    body: dict
    seq: int
    visible_at: float = 0.0
    delivery_count: int = 0
    receipt: str | None = None
    last_error: str | None = None


@dataclass
class DeadLetter:
    message_id: str
    body: dict
    delivery_count: int
    reason: str


@dataclass
class QueueStats:
    sent: int = 0
    deduplicated: int = 0
    received: int = 0
    redeliveries: int = 0
    deleted: int = 0
    dead_lettered: int = 0


class DurableQueue:
    def __init__(
        self,
        name: str,
        clock: Callable[[], float],
        visibility_timeout: float = 30.0,
        max_deliveries: int = 5,
    ):
        if visibility_timeout <= 0 or max_deliveries < 1:
            raise ValueError("visibility_timeout must be positive and max_deliveries >= 1")
        self.name = name
        self.clock = clock
        self.visibility_timeout = visibility_timeout
        self.max_deliveries = max_deliveries
        self.dead_letter: list[DeadLetter] = []
        self.stats = QueueStats()
        self._entries: dict[str, _Entry] = {}
        self._dedup: dict[str, str] = {}
        # (visible_at, seq, message_id); entries go stale when a message is
        # received or deleted and are skipped lazily
        self._heap: list[tuple[float, int, str]] = []
        self._ids = itertools.count()
        self._receipts = itertools.count()
        self._lock = threading.Lock()

    def send(self, body: dict, dedup_key: str | None = None) -> str | None:
        """Enqueue ``body``. With ``dedup_key``, a key seen before is a no-op
        and returns None."""
        with self._lock:
            if dedup_key is not None:
                if dedup_key in self._dedup:
                    self.stats.deduplicated += 1
                    return None
            n = next(self._ids)
            mid = f"{self.name}-{n:08d}"
            entry = _Entry(mid, dict(body), n, visible_at=self.clock())
            self._entries[mid] = entry
            heapq.heappush(self._heap, (entry.visible_at, n, mid))
            if dedup_key is not None:
                self._dedup[dedup_key] = mid
            self.stats.sent += 1
            return mid

    def _live_top(self) -> _Entry | None:
        while self._heap:
            visible_at, _, mid = self._heap[0]
            entry = self._entries.get(mid)
            if entry is not None and entry.visible_at == visible_at:
                return entry
            heapq.heappop(self._heap)
        return None

    def receive(self, max_messages: int = 1) -> list[QueueMessage]:
        """Deliver up to ``max_messages`` visible messages, oldest deadline first."""
        now = self.clock()
        out = []
        with self._lock:
            while len(out) < max_messages:
                entry = self._live_top()
                if entry is None or entry.visible_at > now:
                    break
                heapq.heappop(self._heap)
                if entry.delivery_count >= self.max_deliveries:
                    self._to_dead_letter(entry)
                    continue
                entry.delivery_count += 1
                if entry.delivery_count > 1:
                    self.stats.redeliveries += 1
                entry.receipt = f"{entry.message_id}#{next(self._receipts)}"
                entry.visible_at = now + self.visibility_timeout
                heapq.heappush(self._heap, (entry.visible_at, entry.seq, entry.message_id))
                self.stats.received += 1
                out.append(
                    QueueMessage(entry.message_id, dict(entry.body), entry.receipt, entry.delivery_count, entry.visible_at)
                )
        return out

    def _to_dead_letter(self, entry: _Entry) -> None:
        del self._entries[entry.message_id]
        reason = entry.last_error or "max deliveries exceeded"
        self.dead_letter.append(DeadLetter(entry.message_id, entry.body, entry.delivery_count, reason))
        self.stats.dead_lettered += 1

    def delete(self, receipt_handle: str) -> bool:
        """Acknowledge a delivery. Stale receipts (the message was redelivered
        since) are rejected and return False."""
        mid = receipt_handle.split("#", 1)[0]
        with self._lock:
            entry = self._entries.get(mid)
            if entry is None or entry.receipt != receipt_handle:
                return False
            del self._entries[mid]
            self.stats.deleted += 1
            return True

    def fail(self, receipt_handle: str, reason: str) -> None:
        """Record why a delivery failed; the message reappears after its timeout."""
        mid = receipt_handle.split("#", 1)[0]
        with self._lock:
            entry = self._entries.get(mid)
            if entry is not None and entry.receipt == receipt_handle:
                entry.last_error = reason

    def sweep(self) -> None:
        """Move visible messages that exhausted their deliveries to dead letter."""
        now = self.clock()
        with self._lock:
            for entry in list(self._entries.values()):
                if entry.visible_at <= now and entry.delivery_count >= self.max_deliveries:
                    self._to_dead_letter(entry)

    @property
    def depth(self) -> int:
        """Messages currently visible."""
        now = self.clock()
        with self._lock:
            return sum(1 for e in self._entries.values() if e.visible_at <= now)

    @property
    def in_flight(self) -> int:
        now = self.clock()
        with self._lock:
            return sum(1 for e in self._entries.values() if e.visible_at > now)

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def next_visible_at(self) -> float | None:
        with self._lock:
            entry = self._live_top()
            return None if entry is None else entry.visible_at
