"""Two-button collection device simulator.

The device runs on a virtual millisecond clock advanced only by :meth:`Device.tick`.
Each channel keeps an exact rational accumulator so item counts never drift:
after ``a`` seconds of active (non-paused) collection a channel running at
``fps`` has emitted exactly ``floor(a * fps)`` items. Item ``i`` is stamped
with the wall time at which active time ``i / fps`` was reached.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import codecs, synth
from .core import (
    Channel,
    DataItem,
    MediaFormat,
    ObjectKey,
    SessionManifest,
    VitalsRecord,
    Zone,
    digest,
)

logger = logging.getLogger(__name__)

HOUR_MS = 3_600_000
BATTERY_HOURS = 24.0


class StateMachineError(RuntimeError):
    pass


class DiskFullError(RuntimeError):
    pass


class DiskSealedError(RuntimeError):
    pass


class BatteryExhaustedError(RuntimeError):
    pass


class FinalizeError(RuntimeError):
    def __init__(self, bad_keys: list[str]):
        super().__init__(f"{len(bad_keys)} item(s) failed verification: {', '.join(bad_keys[:5])}")
        self.bad_keys = bad_keys


class DeviceState(str, enum.Enum):
    OFF = "off"
    CONFIGURED = "configured"
    COLLECTING = "collecting"
    PRIVACY_PAUSED = "privacy_paused"
    FINALIZING = "finalizing"


@dataclass(frozen=True)
class ChannelConfig:
    channel: Channel
    frame_rate: float  # items per second
    resolution: tuple[int, int]  # sensor (w, h); (sample_rate, 0) for audio
    bytes_per_item: int  # post-encoding size model
    render_size: tuple[int, int]  # synthetic payload (w, h); (sample_rate, 0) for audio
    bit_depth: int = 8
    rgb: bool = False

    def __post_init__(self):
        object.__setattr__(self, "channel", Channel(self.channel))
        if self.frame_rate <= 0:
            raise ValueError(f"{self.channel.value}: frame_rate must be positive")
        if self.bytes_per_item <= 0:
            raise ValueError(f"{self.channel.value}: bytes_per_item must be positive")

    @property
    def rate(self) -> Fraction:
        return Fraction(self.frame_rate).limit_denominator(1000)

    @property
    def media_format(self) -> MediaFormat:
        return MediaFormat.WAV if self.channel is Channel.AUDIO else MediaFormat.TIFF


# Per-item sizes are a model of the stored files, not of the rendered
# payloads. They sum to 2,087,842 B/s, i.e. 7.0000358 GiB per hour:
#   25 fps * (25000 + 25000 + 19862) + 8 fps * 38656 + 1/s * 32044
DEFAULT_CHANNELS: dict[Channel, ChannelConfig] = {
    Channel.WIDE: ChannelConfig(Channel.WIDE, 25, (1280, 720), 25_000, (64, 36), 8, True),
    Channel.NARROW: ChannelConfig(Channel.NARROW, 25, (1280, 720), 25_000, (64, 36), 8, True),
    Channel.DEPTH: ChannelConfig(Channel.DEPTH, 25, (1280, 720), 19_862, (64, 36), 16, False),
    Channel.IR: ChannelConfig(Channel.IR, 8, (160, 120), 38_656, (40, 30), 16, False),
    Channel.AUDIO: ChannelConfig(Channel.AUDIO, 1, (16_000, 0), 32_044, (8_000, 0)),
}


def default_channels(**overrides: dict) -> dict[Channel, ChannelConfig]:
    """Default channel set with per-channel field overrides, e.g.
    ``default_channels(ir={"render_size": (160, 120)})``. A channel mapped to
    ``None`` is disabled."""
    out = dict(DEFAULT_CHANNELS)
    for name, changes in overrides.items():
        ch = Channel(name)
        if changes is None:
            out.pop(ch, None)
            continue
        changes = dict(changes)
        for k in ("resolution", "render_size"):
            if k in changes:
                changes[k] = tuple(changes[k])
        out[ch] = replace(out[ch], **changes)
    return out


@dataclass
class BatteryModel:
    capacity_hours: float = BATTERY_HOURS
    remaining_ms: int | None = None

    def __post_init__(self):
        if self.remaining_ms is None:
            self.remaining_ms = self.capacity_ms
        if not 0 <= self.remaining_ms <= self.capacity_ms:
            raise ValueError("remaining charge outside [0, capacity]")

    @property
    def capacity_ms(self) -> int:
        return int(round(self.capacity_hours * HOUR_MS))

    @property
    def remaining(self) -> float:
        """Remaining charge in hours."""
        return self.remaining_ms / HOUR_MS


class Keyring:
    """key_id -> 256-bit key, persisted as hex in a JSON file kept apart from disks."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path else None
        self._keys: dict[str, bytes] = {}
        if self.path and self.path.exists():
            self._keys = {k: bytes.fromhex(v) for k, v in json.loads(self.path.read_text()).items()}

    def new_key(self, key_id: str, seed: int | None = None) -> bytes:
        if key_id in self._keys:
            return self._keys[key_id]
        if seed is None:
            key = AESGCM.generate_key(bit_length=256)
        else:
            # simulation-only derivation so seeded runs are byte-identical
            key = hashlib.sha256(f"avstudy-disk-key/{seed}/{key_id}".encode()).digest()
        self._keys[key_id] = key
        self.save()
        return key

    def get(self, key_id: str) -> bytes:
        try:
            return self._keys[key_id]
        except KeyError:
            raise KeyError(f"no key {key_id!r} in keyring") from None

    def __contains__(self, key_id: str) -> bool:
        return key_id in self._keys

    def merge(self, other: "Keyring") -> None:
        self._keys.update(other._keys)
        self.save()

    def save(self) -> None:
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            tmp = self.path.with_suffix(".tmp")
            tmp.write_text(json.dumps({k: v.hex() for k, v in sorted(self._keys.items())}, indent=1))
            os.replace(tmp, self.path)


class EncryptedDisk:
    """Removable disk holding AES-GCM ciphertexts keyed by object path.

    With ``root`` set, the disk is a directory tree: ``<key path>.enc`` files,
    ``manifest.json`` and a ``SEALED`` marker. Without it, contents live in memory.
    """

    MANIFEST = "manifest.json"
    SEAL = "SEALED"

    def __init__(self, disk_id: str, key_id: str, capacity_bytes: int = 2 * 10**12, root=None):
        self.disk_id = disk_id
        self.key_id = key_id
        self.capacity_bytes = capacity_bytes
        self.root = Path(root) if root else None
        self._mem: dict[str, bytes] = {}
        self._manifest_text: str | None = None
        self.used_bytes = 0
        self.sealed = False
        if self.root:
            self.root.mkdir(parents=True, exist_ok=True)
            meta = self.root / "disk.json"
            if meta.exists():
                info = json.loads(meta.read_text())
                self.disk_id, self.key_id = info["disk_id"], info["key_id"]
                self.capacity_bytes = info["capacity_bytes"]
                self.used_bytes = sum(p.stat().st_size for p in self.root.rglob("*.enc"))
                self.sealed = (self.root / self.SEAL).exists()
            else:
                meta.write_text(json.dumps({"disk_id": disk_id, "key_id": key_id, "capacity_bytes": capacity_bytes}))

    @classmethod
    def open(cls, root) -> "EncryptedDisk":
        info = json.loads((Path(root) / "disk.json").read_text())
        return cls(info["disk_id"], info["key_id"], info["capacity_bytes"], root)

    @staticmethod
    def _nonce(key_id: str, path: str) -> bytes:
        # each path is written once per disk, so the nonce never repeats under a key
        return hashlib.sha256(f"{key_id}/{path}".encode()).digest()[:12]

    def encrypt(self, key: bytes, path: str, payload: bytes) -> bytes:
        return AESGCM(key).encrypt(self._nonce(self.key_id, path), payload, path.encode())

    def decrypt(self, key: bytes, path: str, ciphertext: bytes) -> bytes:
        return AESGCM(key).decrypt(self._nonce(self.key_id, path), ciphertext, path.encode())

    def _check_writable(self):
        if self.sealed:
            raise DiskSealedError(f"disk {self.disk_id} is sealed")

    def write_many(self, entries: list[tuple[str, bytes]]) -> None:
        """Store ciphertexts atomically as a batch: all fit or none are written."""
        self._check_writable()
        total = sum(len(c) for _, c in entries)
        if self.used_bytes + total > self.capacity_bytes:
            raise DiskFullError(
                f"disk {self.disk_id}: {self.used_bytes} + {total} bytes exceeds capacity {self.capacity_bytes}"
            )
        for path, ciphertext in entries:
            if self.root:
                target = self.root / (path + ".enc")
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_bytes(ciphertext)
            else:
                self._mem[path] = ciphertext
        self.used_bytes += total

    def write(self, path: str, ciphertext: bytes) -> None:
        self.write_many([(path, ciphertext)])

    def read(self, path: str) -> bytes:
        if self.root:
            return (self.root / (path + ".enc")).read_bytes()
        return self._mem[path]

    def corrupt(self, path: str, offset: int = 0) -> None:
        """Flip one ciphertext bit (fault injection)."""
        data = bytearray(self.read(path))
        data[offset % len(data)] ^= 0x01
        if self.root:
            (self.root / (path + ".enc")).write_bytes(bytes(data))
        else:
            self._mem[path] = bytes(data)

    def paths(self) -> list[str]:
        if self.root:
            return sorted(str(p.relative_to(self.root))[: -len(".enc")] for p in self.root.rglob("*.enc"))
        return sorted(self._mem)

    def write_manifest(self, manifest: SessionManifest) -> None:
        self._check_writable()
        text = manifest.to_json()
        if self.root:
            (self.root / self.MANIFEST).write_text(text)
        self._manifest_text = text

    def manifest(self) -> SessionManifest | None:
        if self.root and (self.root / self.MANIFEST).exists():
            return SessionManifest.from_json((self.root / self.MANIFEST).read_text())
        if self._manifest_text:
            return SessionManifest.from_json(self._manifest_text)
        return None

    def seal(self) -> None:
        self.sealed = True
        if self.root:
            (self.root / self.SEAL).write_text(self.disk_id)

    def contents_digest(self) -> str:
        h = hashlib.sha256()
        for path in self.paths():
            h.update(path.encode() + b"\0" + self.read(path))
        man = self.manifest()
        if man:
            h.update(man.to_json().encode())
        return h.hexdigest()


@dataclass
class _Segment:
    active_start_ms: int
    wall_start_ms: int


@dataclass
class _ChannelState:
    config: ChannelConfig
    emitted: int = 0


class Device:
    """Single-owner device instance. Not thread-safe; run one per thread."""

    def __init__(
        self,
        study_id: str,
        site_id: str,
        *,
        channels: dict[Channel, ChannelConfig] | None = None,
        seed: int = 0,
        disk: EncryptedDisk | None = None,
        keyring: Keyring | None = None,
        battery: BatteryModel | None = None,
        materialize: bool = True,
        clock_start_ms: int = 0,
        time_scale: float = 0.0,
    ):
        self.study_id = study_id
        self.site_id = site_id
        self.channels = dict(channels if channels is not None else DEFAULT_CHANNELS)
        self.seed = seed
        self.keyring = keyring or Keyring()
        self.disk = disk
        self.battery = battery or BatteryModel()
        self.materialize = materialize
        self.time_scale = time_scale
        self.now_ms = clock_start_ms
        self.state = DeviceState.OFF
        self.subject_id = self.ward_id = self.device_id = self.session_id = None
        self.manifest: SessionManifest | None = None
        self._active_ms = 0
        self._segments: list[_Segment] = []
        self._gap_open: int | None = None
        self._chan: dict[Channel, _ChannelState] = {}
        self._written: list[str] = []

    # state machine ---------------------------------------------------------

    def _require(self, op: str, *states: DeviceState) -> None:
        if self.state not in states:
            raise StateMachineError(f"{op} not allowed in state {self.state.value}")

    def configure(self, subject_id: str, ward_id: str, device_id: str, session_id: str = "sess-01") -> "Device":
        self._require("configure", DeviceState.OFF)
        # validates the identifiers as key components up front
        ObjectKey(self.study_id, self.site_id, subject_id, session_id, Channel.WIDE, Zone.RAW, 0)
        self.subject_id, self.ward_id, self.device_id, self.session_id = subject_id, ward_id, device_id, session_id
        self.state = DeviceState.CONFIGURED
        return self

    def press_power(self) -> "Device":
        self._require(
            "press_power", DeviceState.CONFIGURED, DeviceState.COLLECTING, DeviceState.PRIVACY_PAUSED
        )
        if self.state is DeviceState.CONFIGURED:
            self._start_session()
            self.state = DeviceState.COLLECTING
            return self
        self.state = DeviceState.FINALIZING
        self._finalize()
        return self

    def press_privacy(self) -> "Device":
        self._require("press_privacy", DeviceState.COLLECTING, DeviceState.PRIVACY_PAUSED)
        if self.state is DeviceState.COLLECTING:
            self._gap_open = self.now_ms
            self.state = DeviceState.PRIVACY_PAUSED
        else:
            self._close_gap()
            self._segments.append(_Segment(self._active_ms, self.now_ms))
            self.state = DeviceState.COLLECTING
        return self

    def swap_disk(self, fresh: EncryptedDisk) -> EncryptedDisk | None:
        self._require("swap_disk", DeviceState.CONFIGURED, DeviceState.OFF)
        removed = self.disk
        if removed is not None:
            removed.seal()
        self.disk = fresh
        return removed

    def swap_battery(self, fresh: BatteryModel) -> BatteryModel:
        self._require("swap_battery", DeviceState.CONFIGURED, DeviceState.OFF)
        removed, self.battery = self.battery, fresh
        return removed

    # session ---------------------------------------------------------------

    def _start_session(self) -> None:
        if self.materialize:
            if self.disk is None:
                raise StateMachineError("no disk installed")
            if self.disk.sealed:
                raise DiskSealedError(f"disk {self.disk.disk_id} is sealed")
            self.keyring.new_key(self.disk.key_id, self.seed)
        self.manifest = SessionManifest(
            session_id=self.session_id,
            subject_id=self.subject_id,
            device_id=self.device_id,
            ward_id=self.ward_id,
            study_id=self.study_id,
            site_id=self.site_id,
            start=self.now_ms,
            end=self.now_ms,
        )
        self._active_ms = 0
        self._segments = [_Segment(0, self.now_ms)]
        self._gap_open = None
        self._chan = {ch: _ChannelState(cfg) for ch, cfg in sorted(self.channels.items(), key=lambda kv: kv[0].value)}
        self._written = []

    def _close_gap(self) -> None:
        if self._gap_open is not None:
            if self.now_ms > self._gap_open:
                self.manifest.privacy_gaps.append((self._gap_open, self.now_ms))
            self._gap_open = None

    def _wall_of(self, active: Fraction) -> int:
        """Wall-clock ms at which ``active`` seconds of collection had elapsed."""
        active_ms = active * 1000
        seg = self._segments[0]
        for s in self._segments:
            if s.active_start_ms <= active_ms:
                seg = s
            else:
                break
        return seg.wall_start_ms + int((active_ms - seg.active_start_ms) // 1)

    def tick(self, dt: float) -> list[DataItem]:
        """Advance the virtual clock by ``dt`` seconds (rounded to whole ms)."""
        self._require("tick", DeviceState.COLLECTING, DeviceState.PRIVACY_PAUSED)
        dt_ms = int(round(dt * 1000))
        if dt <= 0 or dt_ms <= 0:
            raise ValueError("dt must be at least one millisecond")
        step_ms = min(dt_ms, self.battery.remaining_ms)
        if step_ms == 0:
            self._force_shutdown()
            raise BatteryExhaustedError("battery exhausted")
        overrun = dt_ms > self.battery.remaining_ms

        items: list[DataItem] = []
        planned: list[tuple[_ChannelState, int]] = []
        if self.state is DeviceState.COLLECTING:
            new_active = self._active_ms + step_ms
            for st in self._chan.values():
                total = int(Fraction(new_active, 1000) * st.config.rate)
                planned.append((st, total))
            if self.materialize:
                items = [item for st, total in planned for item in self._render(st, st.emitted, total)]
                key = self.keyring.get(self.disk.key_id)
                entries = [(it.key.serialize(), self.disk.encrypt(key, it.key.serialize(), it.payload)) for it in items]
                self.disk.write_many(entries)  # DiskFullError leaves the device untouched
                self._written.extend(p for p, _ in entries)

        # commit
        if self.state is DeviceState.COLLECTING:
            for st, total in planned:
                if not self.materialize:
                    self.manifest.record_count(st.config.channel, st.emitted, total, st.config.bytes_per_item)
                st.emitted = total
            for it in items:
                self.manifest.record(
                    it.key, it.checksum, len(it.payload), self._chan[it.key.channel].config.bytes_per_item, it.timestamp
                )
            self._active_ms += step_ms
        self.now_ms += step_ms
        self.battery.remaining_ms -= step_ms
        if self.time_scale > 0:
            time.sleep(step_ms / 1000 * self.time_scale)

        if overrun:
            self._force_shutdown()
            raise BatteryExhaustedError(f"battery exhausted at t={self.now_ms} ms")
        return items

    def _force_shutdown(self) -> None:
        self.state = DeviceState.FINALIZING
        self._finalize()

    def _render(self, st: _ChannelState, start: int, stop: int) -> Iterable[DataItem]:
        cfg = st.config
        for seq in range(start, stop):
            key = ObjectKey(self.study_id, self.site_id, self.subject_id, self.session_id, cfg.channel, Zone.RAW, seq)
            ts = self._wall_of(Fraction(seq) / cfg.rate)
            payload = render_payload(cfg, self.seed, self.session_id, seq)
            yield DataItem(key, ts, cfg.media_format, payload)

    def _finalize(self) -> None:
        self._close_gap()
        self.manifest.end = self.now_ms
        self.manifest.privacy_gaps.sort()
        if self.materialize:
            key = self.keyring.get(self.disk.key_id)
            bad = []
            for path in self._written:
                try:
                    plain = self.disk.decrypt(key, path, self.disk.read(path))
                except (InvalidTag, FileNotFoundError, KeyError):
                    bad.append(path)
                    continue
                if digest(plain) != self.manifest.checksums[path]:
                    bad.append(path)
            if bad:
                raise FinalizeError(bad)
            self.disk.write_manifest(self.manifest)
        self.manifest.validate()
        self.state = DeviceState.OFF
        logger.info("session %s finalized: %d items", self.session_id, self.manifest.total_items)


def render_payload(cfg: ChannelConfig, seed: int, session_id: str, sequence: int) -> bytes:
    rng = synth.item_rng(seed, session_id, cfg.channel, sequence)
    if cfg.channel is Channel.AUDIO:
        rate = cfg.render_size[0]
        tone = synth.audio_tone(rng, rate)
        return codecs.encode_wav(synth.render_audio(tone, rate), rate)
    w, h = cfg.render_size
    frame = synth.render_frame(
        w,
        h,
        bed=synth.bed_box(w, h),
        person=synth.person_box(w, h, sequence),
        rng=rng,
        dtype=np.uint8 if cfg.bit_depth == 8 else np.uint16,
        rgb=cfg.rgb,
    )
    return codecs.encode_tiff(frame)


def planted_truth(cfg: ChannelConfig, seed: int, session_id: str, sequence: int) -> dict:
    """Ground truth embedded in a rendered payload."""
    if cfg.channel is Channel.AUDIO:
        rng = synth.item_rng(seed, session_id, cfg.channel, sequence)
        tone = synth.audio_tone(rng, cfg.render_size[0])
        return {"amplitude": tone.amplitude, "frequency": tone.frequency}
    w, h = cfg.render_size
    return {"bed_region": synth.bed_box(w, h), "person_region": synth.person_box(w, h, sequence)}


# scenarios -----------------------------------------------------------------


@dataclass(frozen=True)
class ButtonEvent:
    at: float  # seconds after power-on
    button: str  # "privacy" | "power"

    def __post_init__(self):
        if self.button not in ("privacy", "power"):
            raise ValueError(f"unknown button {self.button!r}")
        if self.at < 0:
            raise ValueError("event time must be non-negative")


@dataclass
class SessionConfig:
    study_id: str = "chronic1"
    site_id: str = "siteA"
    subject_id: str = "S001"
    ward_id: str = "W1"
    device_id: str = "D1"
    session_id: str = "sess-01"
    channels: dict[Channel, ChannelConfig] = field(default_factory=lambda: dict(DEFAULT_CHANNELS))
    clock_start_ms: int = 0
    disk_capacity_bytes: int = 2 * 10**12


def run_session(
    config: SessionConfig,
    duration: float,
    scenario: Iterable[ButtonEvent | tuple] = (),
    seed: int = 0,
    *,
    disk_root=None,
    keyring: Keyring | None = None,
    materialize: bool = True,
    tick_seconds: float = 1.0,
    time_scale: float = 0.0,
) -> tuple[SessionManifest, EncryptedDisk | None]:
    """Power on, run ``duration`` seconds applying button events, power off.

    Returns the finalized manifest and the sealed disk (``None`` when not
    materializing)."""
    events = sorted((e if isinstance(e, ButtonEvent) else ButtonEvent(*e) for e in scenario), key=lambda e: e.at)
    keyring = keyring if keyring is not None else Keyring()
    disk = None
    if materialize:
        disk_id = f"{config.device_id}-{config.subject_id}-{config.session_id}"
        disk = EncryptedDisk(disk_id, f"key-{disk_id}", config.disk_capacity_bytes, disk_root)
    device = Device(
        config.study_id,
        config.site_id,
        channels=config.channels,
        seed=seed,
        disk=disk,
        keyring=keyring,
        materialize=materialize,
        clock_start_ms=config.clock_start_ms,
        time_scale=time_scale,
    )
    device.configure(config.subject_id, config.ward_id, config.device_id, config.session_id)
    device.press_power()
    duration_ms = int(round(duration * 1000))
    step_ms = max(1, int(round(tick_seconds * 1000)))
    t = 0
    pending = list(events)
    while t < duration_ms and device.state in (DeviceState.COLLECTING, DeviceState.PRIVACY_PAUSED):
        while pending and int(round(pending[0].at * 1000)) <= t:
            ev = pending.pop(0)
            if ev.button == "privacy":
                device.press_privacy()
            else:
                device.press_power()
                break
        if device.state not in (DeviceState.COLLECTING, DeviceState.PRIVACY_PAUSED):
            break
        nxt = min(duration_ms, t + step_ms)
        if pending:
            nxt = min(nxt, max(t + 1, int(round(pending[0].at * 1000))))
        device.tick((nxt - t) / 1000)
        t = nxt
    if device.state in (DeviceState.COLLECTING, DeviceState.PRIVACY_PAUSED):
        device.press_power()
    if disk is not None:
        disk.seal()
    return device.manifest, disk


# vitals --------------------------------------------------------------------


def simulate_vitals(
    config: SessionConfig,
    duration: float,
    *,
    rate: float = 2.0,
    seed: int = 0,
    disk_root=None,
    keyring: Keyring | None = None,
) -> tuple[SessionManifest, EncryptedDisk]:
    """Bedside vitals monitor: HR/RR every ``1/rate`` s, SpO2 and blood
    pressure on the first and last reading. It is a separate device, so the
    AV device's privacy button does not pause it."""
    keyring = keyring if keyring is not None else Keyring()
    device_id = f"vitals-{config.device_id}"
    disk_id = f"{device_id}-{config.subject_id}-{config.session_id}"
    disk = EncryptedDisk(disk_id, f"key-{disk_id}", config.disk_capacity_bytes, disk_root)
    key = keyring.new_key(disk.key_id, seed)
    start = config.clock_start_ms
    manifest = SessionManifest(
        session_id=config.session_id,
        subject_id=config.subject_id,
        device_id=device_id,
        ward_id=config.ward_id,
        study_id=config.study_id,
        site_id=config.site_id,
        start=start,
        end=start + int(round(duration * 1000)),
    )
    count = int(Fraction(duration).limit_denominator(1000) * Fraction(rate).limit_denominator(1000))
    rng = np.random.default_rng(synth._seed_words(seed, config.session_id, "vitals", config.subject_id))
    hr, rr = float(rng.uniform(60, 95)), float(rng.uniform(12, 20))
    entries = []
    for seq in range(count):
        hr = float(np.clip(hr + rng.normal(0, 1.0), 40, 160))
        rr = float(np.clip(rr + rng.normal(0, 0.3), 6, 40))
        edge = seq in (0, count - 1)
        rec = VitalsRecord(
            timestamp=start + int(Fraction(seq * 1000) / Fraction(rate).limit_denominator(1000)),
            hr=round(hr, 1),
            rr=round(rr, 1),
            spo2=round(float(rng.uniform(94, 99.5)), 1) if edge else None,
            bp_systolic=float(rng.integers(110, 140)) if edge else None,
            bp_diastolic=float(rng.integers(65, 90)) if edge else None,
        )
        okey = ObjectKey(config.study_id, config.site_id, config.subject_id, config.session_id, Channel.VITALS, Zone.RAW, seq)
        payload = rec.to_csv()
        path = okey.serialize()
        entries.append((path, disk.encrypt(key, path, payload)))
        manifest.record(okey, digest(payload), len(payload), timestamp=rec.timestamp)
    disk.write_many(entries)
    disk.write_manifest(manifest)
    disk.seal()
    return manifest, disk
