"""Moving sealed disks into the object store.

Two paths mirror the study's options: network upload from a control PC and
bulk courier appliances shipped to the data centre. Both decrypt at ingest,
verify every payload against the session manifest, quarantine mismatches
instead of dropping them, and record progress in a per-disk transfer log so
an interrupted upload resumes without re-sending verified items.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable

from cryptography.exceptions import InvalidTag

from .core import SessionManifest, Zone, digest, parse_key
from .device import DiskSealedError, EncryptedDisk, Keyring
from .store import ColdStore, ObjectStore

logger = logging.getLogger(__name__)

COURIER_CAPACITY = 100 * 10**12
TRANSFER_LOG_DIR = "_transfers"


def manifest_path(manifest: SessionManifest) -> str:
    return f"manifests/{manifest.study_id}/{manifest.subject_id}/{manifest.session_id}/{manifest.device_id}.json"


def load_manifests(store: ObjectStore) -> list[SessionManifest]:
    return [SessionManifest.from_json(store.get(p).decode()) for p in store.keys("manifests/")]


@dataclass(frozen=True)
class TransferFaults:
    """Faults injected into one transfer run.

    ``interrupt_after``: the link drops after this many items were sent.
    ``corrupt``: manifest paths whose bytes get one bit flipped in flight.
    """

    interrupt_after: int | None = None
    corrupt: frozenset[str] = frozenset()


@dataclass
class DataLossEvent:
    courier_id: str
    keys: list[str]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TransferReport:
    mode: str
    disks: list[str] = field(default_factory=list)
    statuses: dict[str, str] = field(default_factory=dict)
    transferred: int = 0
    bytes_sent: int = 0
    elapsed_s: float = 0.0
    interrupted: bool = False
    loss: DataLossEvent | None = None

    @property
    def stored(self) -> int:
        return sum(1 for s in self.statuses.values() if s in ("stored", "present"))

    @property
    def quarantined(self) -> list[str]:
        return sorted(p for p, s in self.statuses.items() if s.startswith("quarantined"))

    @property
    def lost_keys(self) -> list[str]:
        return list(self.loss.keys) if self.loss else []

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "disks": self.disks,
            "stored": self.stored,
            "quarantined": self.quarantined,
            "transferred": self.transferred,
            "bytes_sent": self.bytes_sent,
            "elapsed_s": self.elapsed_s,
            "interrupted": self.interrupted,
            "lost_keys": self.lost_keys,
            "statuses": dict(sorted(self.statuses.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


class _TransferLog:
    """Append-only JSON-lines log of verified outcomes, one file per disk."""

    def __init__(self, store: ObjectStore, disk_id: str):
        self.file = store.root / TRANSFER_LOG_DIR / f"{disk_id}.jsonl"
        self.file.parent.mkdir(parents=True, exist_ok=True)

    def entries(self) -> dict[str, dict]:
        out = {}
        if self.file.exists():
            for line in self.file.read_text().splitlines():
                if line.strip():
                    rec = json.loads(line)
                    out[rec["path"]] = rec
        return out

    def append(self, path: str, status: str, checksum: str) -> None:
        with open(self.file, "a") as fh:
            fh.write(json.dumps({"path": path, "status": status, "checksum": checksum}, sort_keys=True) + "\n")


def _ingest_items(
    *,
    disk_id: str,
    manifest: SessionManifest,
    read_ciphertext,
    decrypt,
    store: ObjectStore,
    report: TransferReport,
    faults: TransferFaults,
) -> None:
    log = _TransferLog(store, disk_id)
    done = log.entries()
    store.replace(manifest_path(manifest), manifest.to_json().encode())
    for path in sorted(manifest.checksums):
        expected = manifest.checksums[path]
        prior = done.get(path)
        if prior is not None:
            if prior["status"] == "stored" and store.exists(path) and digest(store.get(path)) == expected:
                report.statuses[path] = "present"
                continue
            if prior["status"].startswith("quarantined"):
                report.statuses[path] = prior["status"]
                continue
        if faults.interrupt_after is not None and report.transferred >= faults.interrupt_after:
            report.interrupted = True
            logger.warning("transfer of %s interrupted after %d items", disk_id, report.transferred)
            return
        ciphertext = read_ciphertext(path)
        report.transferred += 1
        try:
            payload = decrypt(path, ciphertext)
        except InvalidTag:
            store.quarantine(path, ciphertext)
            report.statuses[path] = "quarantined:decrypt"
            log.append(path, "quarantined:decrypt", expected)
            continue
        report.bytes_sent += len(payload)
        if path in faults.corrupt:
            flipped = bytearray(payload)
            flipped[len(flipped) // 2] ^= 0x10
            payload = bytes(flipped)
        if digest(payload) != expected:
            store.quarantine(path, payload)
            report.statuses[path] = "quarantined:checksum"
            log.append(path, "quarantined:checksum", expected)
            continue
        store.put(path, payload)
        report.statuses[path] = "stored"
        log.append(path, "stored", expected)


def upload_network(
    disk: EncryptedDisk,
    store: ObjectStore,
    keyring: Keyring,
    bandwidth: float = 50e6,
    faults: TransferFaults | None = None,
) -> TransferReport:
    """Upload a sealed disk over the network. ``bandwidth`` is in bytes per
    virtual second; ``elapsed_s`` is bytes sent / bandwidth."""
    if not disk.sealed:
        raise DiskSealedError(f"disk {disk.disk_id} must be sealed before upload")
    manifest = disk.manifest()
    if manifest is None:
        raise ValueError(f"disk {disk.disk_id} has no manifest")
    key = keyring.get(disk.key_id)
    report = TransferReport(mode="network", disks=[disk.disk_id])
    _ingest_items(
        disk_id=disk.disk_id,
        manifest=manifest,
        read_ciphertext=disk.read,
        decrypt=lambda p, c: disk.decrypt(key, p, c),
        store=store,
        report=report,
        faults=faults or TransferFaults(),
    )
    report.elapsed_s = report.bytes_sent / bandwidth
    return report


# courier -------------------------------------------------------------------


class CourierState(str, enum.Enum):
    ON_SITE = "on_site"
    IN_TRANSIT = "in_transit"
    ARRIVED = "arrived"
    LOST = "lost"


class CourierError(RuntimeError):
    pass


@dataclass
class _LoadedDisk:
    disk_id: str
    key_id: str
    manifest_json: str
    items: dict[str, bytes]


@dataclass
class CourierDevice:
    courier_id: str
    capacity_bytes: int = COURIER_CAPACITY
    state: CourierState = CourierState.ON_SITE
    loaded_bytes: int = 0
    disks: list[_LoadedDisk] = field(default_factory=list)

    def can_accept(self, nbytes: int) -> bool:
        return self.loaded_bytes + nbytes <= self.capacity_bytes

    def keys(self) -> list[str]:
        return sorted(p for d in self.disks for p in d.items)


def load_courier(disk: EncryptedDisk, courier: CourierDevice) -> CourierDevice:
    if courier.state is not CourierState.ON_SITE:
        raise CourierError(f"courier {courier.courier_id} is {courier.state.value}, not on site")
    if not disk.sealed:
        raise DiskSealedError(f"disk {disk.disk_id} must be sealed before loading")
    manifest = disk.manifest()
    if manifest is None:
        raise ValueError(f"disk {disk.disk_id} has no manifest")
    items = {p: disk.read(p) for p in disk.paths()}
    nbytes = sum(len(c) for c in items.values())
    if not courier.can_accept(nbytes):
        raise CourierError(
            f"courier {courier.courier_id}: {courier.loaded_bytes} + {nbytes} bytes exceeds {courier.capacity_bytes}"
        )
    courier.disks.append(_LoadedDisk(disk.disk_id, disk.key_id, manifest.to_json(), items))
    courier.loaded_bytes += nbytes
    return courier


def ship_courier(courier: CourierDevice, outcome: CourierState | str) -> CourierDevice:
    outcome = CourierState(outcome)
    if outcome not in (CourierState.ARRIVED, CourierState.LOST):
        raise CourierError("shipping outcome must be arrived or lost")
    if courier.state is not CourierState.ON_SITE:
        raise CourierError(f"courier {courier.courier_id} already shipped")
    courier.state = CourierState.IN_TRANSIT
    courier.state = outcome
    return courier


def ingest_courier(
    courier: CourierDevice,
    store: ObjectStore,
    keyring: Keyring,
    twin: CourierDevice | None = None,
    bandwidth: float = 10e9,
    faults: TransferFaults | None = None,
) -> TransferReport:
    """Ingest a shipped courier. If it was lost, a twin carrying the same
    disks is used instead; without one every key it carried is reported lost."""
    report = TransferReport(mode="courier")
    source = courier
    if courier.state is CourierState.LOST:
        if twin is not None and twin.state is CourierState.ARRIVED:
            source = twin
        else:
            report.loss = DataLossEvent(courier.courier_id, courier.keys())
            logger.error("courier %s lost: %d keys unrecoverable", courier.courier_id, len(report.loss.keys))
            return report
    elif courier.state is not CourierState.ARRIVED:
        raise CourierError(f"courier {courier.courier_id} has not arrived")
    for loaded in source.disks:
        key = keyring.get(loaded.key_id)
        report.disks.append(loaded.disk_id)
        nonce_disk = EncryptedDisk(loaded.disk_id, loaded.key_id)
        _ingest_items(
            disk_id=loaded.disk_id,
            manifest=SessionManifest.from_json(loaded.manifest_json),
            read_ciphertext=loaded.items.__getitem__,
            decrypt=lambda p, c, k=key, d=nonce_disk: d.decrypt(k, p, c),
            store=store,
            report=report,
            faults=faults or TransferFaults(),
        )
    report.elapsed_s = report.bytes_sent / bandwidth
    return report


# archive and verification --------------------------------------------------


def archive(store: ObjectStore, cold: ColdStore) -> int:
    """Copy every raw object without a cold copy. Returns the number copied."""
    copied = 0
    for path in store.raw_keys():
        if not cold.has(path) and cold.append(path, store.get(path)):
            copied += 1
    return copied


@dataclass
class VerificationReport:
    checked: int = 0
    missing: list[str] = field(default_factory=list)
    extra: list[str] = field(default_factory=list)
    mismatched: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.missing or self.extra or self.mismatched)

    def to_dict(self) -> dict:
        return asdict(self) | {"ok": self.ok}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def verify(manifest: SessionManifest, store: ObjectStore) -> VerificationReport:
    """Compare a manifest against the raw zone of the store."""
    report = VerificationReport()
    for path, expected in sorted(manifest.checksums.items()):
        report.checked += 1
        if not store.exists(path):
            report.missing.append(path)
        elif digest(store.get(path)) != expected:
            report.mismatched.append(path)
    prefixes = {
        "/".join([manifest.study_id, manifest.site_id, manifest.subject_id, manifest.session_id, ch, Zone.RAW.value]) + "/"
        for ch in manifest.channels
    }
    for prefix in sorted(prefixes):
        for path in store.keys(prefix):
            parse_key(path)
            if path not in manifest.checksums:
                report.extra.append(path)
    return report


def verify_all(manifests: Iterable[SessionManifest], store: ObjectStore) -> VerificationReport:
    total = VerificationReport()
    for m in manifests:
        r = verify(m, store)
        total.checked += r.checked
        total.missing += r.missing
        total.extra += r.extra
        total.mismatched += r.mismatched
    return total
