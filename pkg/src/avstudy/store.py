"""Filesystem-backed object store and cold archive.

Objects live at ``<root>/objects/<path>``. Raw-zone keys are write-once: the
first successful put wins, an identical re-put is a no-op and a put with
different bytes raises :class:`WriteOnceViolation`. All writes go through a
temp file and an atomic link/rename, so readers never see partial objects.
"""

from __future__ import annotations

import itertools
import os
import threading
from collections import defaultdict
from pathlib import Path
from typing import Callable

from .core import KeyParseError, Zone, digest, parse_key

QUARANTINE_PREFIX = "quarantine/"

_tmp_counter = itertools.count()


def _write_temp(target: str, data: bytes) -> str:
    """Write ``data`` to a fresh hidden file beside ``target``."""
    parent = os.path.dirname(target)
    os.makedirs(parent, exist_ok=True)
    tmp = os.path.join(parent, f".tmp-{os.getpid()}-{next(_tmp_counter)}")
    fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o644)
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    return tmp


def _read(target: str) -> bytes:
    with open(target, "rb") as fh:
        return fh.read()


class WriteOnceViolation(RuntimeError):
    pass


def is_raw_path(path: str) -> bool:
    try:
        return parse_key(path).zone is Zone.RAW
    except KeyParseError:
        return False


class ObjectStore:
    def __init__(self, root):
        self.root = Path(root)
        self.objects = self.root / "objects"
        self.objects.mkdir(parents=True, exist_ok=True)
        self._base = str(self.objects)
        self._locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        self._locks_guard = threading.Lock()
        self._subscribers: list[Callable[[str], None]] = []
        self.violations: list[str] = []

    def _lock(self, path: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks[path]

    def _file(self, path: str) -> str:
        if not path or path.startswith("/") or ".." in path.split("/"):
            raise ValueError(f"invalid object path {path!r}")
        return os.path.join(self._base, path)

    def subscribe(self, callback: Callable[[str], None]) -> None:
        """Call ``callback(path)`` after each newly created raw object."""
        self._subscribers.append(callback)

    def put_if_absent(self, path: str, data: bytes) -> bool:
        """Create ``path`` unless it exists. Returns True if this call created it."""
        target = self._file(path)
        with self._lock(path):
            if os.path.exists(target):
                return False
            tmp = _write_temp(target, data)
            try:
                os.link(tmp, target)
            except FileExistsError:
                return False
            finally:
                os.unlink(tmp)
        if is_raw_path(path):
            for cb in self._subscribers:
                cb(path)
        return True

    def put(self, path: str, data: bytes) -> bool:
        """Store an object. Raw-zone paths are write-once; other paths are
        replaced atomically. Returns True if the stored bytes changed."""
        if is_raw_path(path):
            if self.put_if_absent(path, data):
                return True
            if self.get(path) != data:
                self.violations.append(path)
                raise WriteOnceViolation(f"raw object {path} already holds different bytes")
            return False
        return self.replace(path, data)

    def replace(self, path: str, data: bytes) -> bool:
        if is_raw_path(path):
            raise WriteOnceViolation(f"raw object {path} cannot be replaced")
        target = self._file(path)
        with self._lock(path):
            if os.path.exists(target) and _read(target) == data:
                return False
            tmp = _write_temp(target, data)
            os.replace(tmp, target)
        return True

    def compare_and_swap(self, path: str, expected_digest: str | None, data: bytes) -> bool:
        """Replace ``path`` only if its current digest equals ``expected_digest``
        (``None`` meaning absent). Returns True on success."""
        if is_raw_path(path):
            raise WriteOnceViolation(f"raw object {path} cannot be replaced")
        target = self._file(path)
        with self._lock(path):
            current = digest(_read(target)) if os.path.exists(target) else None
            if current != expected_digest:
                return False
            tmp = _write_temp(target, data)
            os.replace(tmp, target)
        return True

    def get(self, path: str) -> bytes:
        try:
            return _read(self._file(path))
        except FileNotFoundError:
            raise KeyError(path) from None

    def exists(self, path: str) -> bool:
        return os.path.isfile(self._file(path))

    def size(self, path: str) -> int:
        return os.path.getsize(self._file(path))

    def delete(self, path: str, *, force: bool = False) -> None:
        if is_raw_path(path) and not force:
            raise WriteOnceViolation(f"raw object {path} cannot be deleted")
        with self._lock(path):
            os.unlink(self._file(path))

    def keys(self, prefix: str = "") -> list[str]:
        # walk only the deepest directory the prefix pins down
        head = prefix.rsplit("/", 1)[0] + "/" if "/" in prefix else ""
        base = self.objects / head if head else self.objects
        out = []
        for dirpath, _, files in os.walk(base):
            rel_dir = dirpath[len(str(self.objects)) + 1 :].replace(os.sep, "/")
            for name in files:
                if name.startswith(".tmp-"):
                    continue
                rel = f"{rel_dir}/{name}" if rel_dir else name
                if rel.startswith(prefix):
                    out.append(rel)
        return sorted(out)

    def raw_keys(self) -> list[str]:
        return [k for k in self.keys() if is_raw_path(k)]

    def quarantine(self, path: str, data: bytes) -> str:
        qpath = QUARANTINE_PREFIX + path
        self.replace(qpath, data)
        return qpath


class ColdStore:
    """Append-only archive tier. Each path can be archived once."""

    def __init__(self, root, retrieval_delay_s: float = 4 * 3600.0):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.retrieval_delay_s = retrieval_delay_s
        self._lock = threading.Lock()

    def _file(self, path: str) -> Path:
        return self.root / path

    def has(self, path: str) -> bool:
        return self._file(path).is_file()

    def append(self, path: str, data: bytes) -> bool:
        target = self._file(path)
        with self._lock:
            if target.exists():
                return False
            os.replace(_write_temp(str(target), data), target)
        return True

    def retrieve(self, path: str) -> tuple[bytes, float]:
        """Returns the archived bytes and the modeled retrieval delay (virtual s)."""
        return self._file(path).read_bytes(), self.retrieval_delay_s

    def keys(self) -> list[str]:
        return sorted(
            str(p.relative_to(self.root)).replace(os.sep, "/")
            for p in self.root.rglob("*")
            if p.is_file() and not p.name.startswith(".tmp-")
        )
