"""Shared domain types: object keys, data items, vitals, health records,
session manifests, checksums and the obfuscation rules."""

from __future__ import annotations

import enum
import hashlib
import json
import math
import re
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Iterable


class ValidationError(ValueError):
    """Input rejected by a domain rule. ``field`` names the offending input."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class KeyParseError(ValueError):
    def __init__(self, path: str, component: str, message: str):
        super().__init__(f"bad object key {path!r}: {component}: {message}")
        self.path = path
        self.component = component


class Channel(str, enum.Enum):
    WIDE = "wide"
    NARROW = "narrow"
    DEPTH = "depth"
    IR = "ir"
    AUDIO = "audio"
    VITALS = "vitals"


class Zone(str, enum.Enum):
    RAW = "raw"
    CONVERTED = "converted"
    FEATURES = "features"
    ARCHIVE = "archive"


class MediaFormat(str, enum.Enum):
    TIFF = "tiff"
    PNG = "png"
    WAV = "wav"
    FLAC = "flac"
    VITALS_CSV = "vitals_csv"


IMAGE_CHANNELS = frozenset({Channel.WIDE, Channel.NARROW, Channel.DEPTH, Channel.IR})

SEQUENCE_WIDTH = 6
_COMPONENT_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")
_SEQUENCE_RE = re.compile(r"^\d+$")


def digest(payload: bytes) -> str:
    """SHA-256 of ``payload`` as lowercase hex."""
    return hashlib.sha256(payload).hexdigest()


@dataclass(frozen=True, order=True)
class ObjectKey:
    study_id: str
    site_id: str
    subject_id: str
    session_id: str
    channel: Channel
    zone: Zone
    sequence: int

    def __post_init__(self):
        for name in ("study_id", "site_id", "subject_id", "session_id"):
            value = getattr(self, name)
            if not isinstance(value, str) or not _COMPONENT_RE.match(value):
                raise ValidationError(name, f"invalid key component {value!r}")
        object.__setattr__(self, "channel", Channel(self.channel))
        object.__setattr__(self, "zone", Zone(self.zone))
        if not isinstance(self.sequence, int) or isinstance(self.sequence, bool) or self.sequence < 0:
            raise ValidationError("sequence", f"must be a non-negative integer, got {self.sequence!r}")

    def serialize(self) -> str:
        return "/".join(
            [
                self.study_id,
                self.site_id,
                self.subject_id,
                self.session_id,
                self.channel.value,
                self.zone.value,
                f"{self.sequence:0{SEQUENCE_WIDTH}d}",
            ]
        )

    __str__ = serialize

    def in_zone(self, zone: Zone | str) -> "ObjectKey":
        return replace(self, zone=Zone(zone))

    @property
    def stream(self) -> tuple:
        """Identity of the (session, channel) sequence this key belongs to."""
        return (self.study_id, self.site_id, self.subject_id, self.session_id, self.channel)


@lru_cache(maxsize=1 << 18)  # keys are immutable and parsed on every store access
def parse_key(path: str) -> ObjectKey:
    """Parse a slash-separated key. Only canonical serializations are accepted,
    so ``parse_key(p).serialize() == p`` for every path that parses."""
    parts = path.split("/")
    if len(parts) != 7:
        raise KeyParseError(path, "arity", f"expected 7 components, got {len(parts)}")
    names = ("study_id", "site_id", "subject_id", "session_id")
    for name, part in zip(names, parts[:4]):
        if not _COMPONENT_RE.match(part):
            raise KeyParseError(path, name, f"invalid component {part!r}")
    try:
        channel = Channel(parts[4])
    except ValueError:
        raise KeyParseError(path, "channel", f"unknown channel {parts[4]!r}") from None
    try:
        zone = Zone(parts[5])
    except ValueError:
        raise KeyParseError(path, "zone", f"unknown zone {parts[5]!r}") from None
    seq = parts[6]
    if not _SEQUENCE_RE.match(seq):
        raise KeyParseError(path, "sequence", f"not a decimal number: {seq!r}")
    number = int(seq)
    if f"{number:0{SEQUENCE_WIDTH}d}" != seq:
        raise KeyParseError(path, "sequence", f"non-canonical sequence {seq!r}")
    return ObjectKey(*parts[:4], channel, zone, number)


@dataclass(frozen=True)
class DataItem:
    key: ObjectKey
    timestamp: int  # UTC ms
    media_format: MediaFormat
    payload: bytes
    checksum: str = ""

    def __post_init__(self):
        if not self.payload:
            raise ValidationError("payload", "must be non-empty")
        object.__setattr__(self, "media_format", MediaFormat(self.media_format))
        actual = digest(self.payload)
        if not self.checksum:
            object.__setattr__(self, "checksum", actual)
        elif self.checksum != actual:
            raise ValidationError("checksum", "does not match payload digest")


VITALS_HEADER = "timestamp,hr,rr,spo2,bp_systolic,bp_diastolic"


@dataclass(frozen=True)
class VitalsRecord:
    timestamp: int
    hr: float
    rr: float
    spo2: float | None = None
    bp_systolic: float | None = None
    bp_diastolic: float | None = None

    def __post_init__(self):
        if not self.hr > 0:
            raise ValidationError("hr", "must be positive")
        if not self.rr > 0:
            raise ValidationError("rr", "must be positive")
        if self.spo2 is not None and not 0 <= self.spo2 <= 100:
            raise ValidationError("spo2", "must be a percentage in [0, 100]")
        if (
            self.bp_systolic is not None
            and self.bp_diastolic is not None
            and not self.bp_systolic > self.bp_diastolic
        ):
            raise ValidationError("bp_systolic", "must exceed bp_diastolic")

    def to_csv(self) -> bytes:
        def fmt(v):
            return "" if v is None else repr(float(v))

        row = ",".join(
            [str(self.timestamp), fmt(self.hr), fmt(self.rr), fmt(self.spo2), fmt(self.bp_systolic), fmt(self.bp_diastolic)]
        )
        return f"{VITALS_HEADER}\n{row}\n".encode()

    @classmethod
    def from_csv(cls, data: bytes) -> "VitalsRecord":
        lines = data.decode().strip().splitlines()
        if len(lines) != 2 or lines[0] != VITALS_HEADER:
            raise ValueError("malformed vitals csv")
        ts, hr, rr, spo2, sys_, dia = lines[1].split(",")

        def opt(v):
            return None if v == "" else float(v)

        return cls(int(ts), float(hr), float(rr), opt(spo2), opt(sys_), opt(dia))


# Obfuscation ---------------------------------------------------------------

AGE_MAX, WEIGHT_MAX, HEIGHT_MAX = 120, 400, 250


def _bucket(value: float, width: int) -> tuple[int, int]:
    low = int(math.floor(value / width)) * width
    return low, low + width - 1


def _check_range(name: str, value, upper: float) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or math.isnan(value):
        raise ValidationError(name, f"must be a number, got {value!r}")
    if not 0 < value <= upper:
        raise ValidationError(name, f"{value} outside plausible range (0, {upper}]")
    return float(value)


def obfuscate(exact_age, exact_weight, exact_height) -> tuple[str, str, str]:
    """Discretize age to decades, weight to 10 kg and height to 10 cm buckets."""
    age = _check_range("exact_age", exact_age, AGE_MAX)
    weight = _check_range("exact_weight", exact_weight, WEIGHT_MAX)
    height = _check_range("exact_height", exact_height, HEIGHT_MAX)
    a_lo, a_hi = _bucket(age, 10)
    w_lo, w_hi = _bucket(weight, 10)
    h_lo, h_hi = _bucket(height, 10)
    return f"{a_lo}-{a_hi}", f"{w_lo}-{w_hi} kg", f"{h_lo}-{h_hi} cm"


class Gender(str, enum.Enum):
    FEMALE = "female"
    MALE = "male"
    OTHER = "other"
    UNKNOWN = "unknown"


_AGE_RANGE_RE = re.compile(r"^(\d+)-(\d+)$")
_WEIGHT_RANGE_RE = re.compile(r"^(\d+)-(\d+) kg$")
_HEIGHT_RANGE_RE = re.compile(r"^(\d+)-(\d+) cm$")


@dataclass(frozen=True)
class HealthRecord:
    """Research-visible health data. Only bucketed ranges are stored."""

    subject_id: str
    age_range: str
    gender: Gender
    weight_range: str
    height_range: str
    conditions: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "gender", Gender(self.gender))
        object.__setattr__(self, "conditions", tuple(self.conditions))
        for name, pattern in (
            ("age_range", _AGE_RANGE_RE),
            ("weight_range", _WEIGHT_RANGE_RE),
            ("height_range", _HEIGHT_RANGE_RE),
        ):
            m = pattern.match(getattr(self, name))
            if not m or int(m.group(2)) - int(m.group(1)) != 9 or int(m.group(1)) % 10:
                raise ValidationError(name, f"not a 10-wide bucket: {getattr(self, name)!r}")

    @classmethod
    def from_exact(cls, subject_id, age, gender, weight, height, conditions=()) -> "HealthRecord":
        a, w, h = obfuscate(age, weight, height)
        return cls(subject_id, a, gender, w, h, tuple(conditions))

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "age_range": self.age_range,
            "gender": self.gender.value,
            "weight_range": self.weight_range,
            "height_range": self.height_range,
            "conditions": list(self.conditions),
        }


# Column names a research-facing schema must never carry.
PII_NAMES = frozenset(
    {
        "pii",
        "name",
        "patient_name",
        "first_name",
        "last_name",
        "full_name",
        "given_name",
        "family_name",
        "address",
        "street_address",
        "phone",
        "phone_number",
        "email",
        "ssn",
        "mrn",
        "medical_record_number",
        "date_of_birth",
        "birth_date",
        "dob",
        "exact_age",
        "exact_weight",
        "exact_height",
    }
)
PII_PREFIXES = ("pii_", "pii.", "identity_")


def is_pii_name(name: str) -> bool:
    lowered = name.lower()
    return lowered in PII_NAMES or lowered.startswith(PII_PREFIXES)


@dataclass(frozen=True)
class IdentityMapping:
    subject_id: str
    pii: bytes  # opaque encrypted blob


# Manifests -----------------------------------------------------------------


@dataclass
class ChannelSummary:
    item_count: int = 0
    byte_total: int = 0
    modeled_bytes: int = 0
    first_sequence: int | None = None
    last_sequence: int | None = None


@dataclass
class SessionManifest:
    session_id: str
    subject_id: str
    device_id: str
    ward_id: str
    study_id: str
    site_id: str
    start: int
    end: int
    channels: dict[str, ChannelSummary] = field(default_factory=dict)
    privacy_gaps: list[tuple[int, int]] = field(default_factory=list)
    # key path -> hex sha256 of plaintext payload
    checksums: dict[str, str] = field(default_factory=dict)
    # key path -> plaintext payload size
    sizes: dict[str, int] = field(default_factory=dict)
    # key path -> capture time, UTC ms
    timestamps: dict[str, int] = field(default_factory=dict)

    def record(
        self, key: ObjectKey, checksum: str, size: int, modeled: int | None = None, timestamp: int | None = None
    ) -> None:
        summary = self.channels.setdefault(key.channel.value, ChannelSummary())
        if summary.last_sequence is not None and key.sequence <= summary.last_sequence:
            raise ValidationError("sequence", f"{key} does not increase on {summary.last_sequence}")
        if summary.first_sequence is None:
            summary.first_sequence = key.sequence
        summary.last_sequence = key.sequence
        summary.item_count += 1
        summary.byte_total += size
        summary.modeled_bytes += size if modeled is None else modeled
        path = key.serialize()
        self.checksums[path] = checksum
        self.sizes[path] = size
        if timestamp is not None:
            self.timestamps[path] = timestamp

    def record_count(self, channel: Channel, first: int, stop: int, modeled_per_item: int) -> None:
        """Account items ``first..stop-1`` that were generated but not materialized."""
        if stop <= first:
            return
        summary = self.channels.setdefault(Channel(channel).value, ChannelSummary())
        if summary.first_sequence is None:
            summary.first_sequence = first
        summary.last_sequence = stop - 1
        summary.item_count += stop - first
        summary.modeled_bytes += (stop - first) * modeled_per_item

    @property
    def total_items(self) -> int:
        return sum(c.item_count for c in self.channels.values())

    @property
    def total_bytes(self) -> int:
        return sum(c.byte_total for c in self.channels.values())

    @property
    def modeled_bytes(self) -> int:
        return sum(c.modeled_bytes for c in self.channels.values())

    def keys(self) -> list[ObjectKey]:
        return [parse_key(p) for p in self.checksums]

    def validate(self) -> None:
        per_channel: dict[str, int] = {}
        for path in self.checksums:
            ch = parse_key(path).channel.value
            per_channel[ch] = per_channel.get(ch, 0) + 1
        if self.checksums:
            for ch, summary in self.channels.items():
                if summary.item_count != per_channel.get(ch, 0):
                    raise ValidationError("channels", f"{ch} count {summary.item_count} != {per_channel.get(ch, 0)} checksums")
        prev_end = None
        for start, end in self.privacy_gaps:
            if not (self.start <= start < end <= self.end):
                raise ValidationError("privacy_gaps", f"gap [{start}, {end}) outside session")
            if prev_end is not None and start < prev_end:
                raise ValidationError("privacy_gaps", "gaps overlap or are unsorted")
            prev_end = end

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "subject_id": self.subject_id,
            "device_id": self.device_id,
            "ward_id": self.ward_id,
            "study_id": self.study_id,
            "site_id": self.site_id,
            "start": self.start,
            "end": self.end,
            "channels": {
                ch: {
                    "item_count": s.item_count,
                    "byte_total": s.byte_total,
                    "modeled_bytes": s.modeled_bytes,
                    "first_sequence": s.first_sequence,
                    "last_sequence": s.last_sequence,
                }
                for ch, s in sorted(self.channels.items())
            },
            "privacy_gaps": [list(g) for g in self.privacy_gaps],
            "checksums": dict(sorted(self.checksums.items())),
            "sizes": dict(sorted(self.sizes.items())),
            "timestamps": dict(sorted(self.timestamps.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "SessionManifest":
        channels = {ch: ChannelSummary(**s) for ch, s in data.get("channels", {}).items()}
        return cls(
            session_id=data["session_id"],
            subject_id=data["subject_id"],
            device_id=data["device_id"],
            ward_id=data["ward_id"],
            study_id=data["study_id"],
            site_id=data["site_id"],
            start=data["start"],
            end=data["end"],
            channels=channels,
            privacy_gaps=[tuple(g) for g in data.get("privacy_gaps", [])],
            checksums=dict(data.get("checksums", {})),
            sizes=dict(data.get("sizes", {})),
            timestamps=dict(data.get("timestamps", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> "SessionManifest":
        return cls.from_dict(json.loads(text))


def merge_gaps(gaps: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    out: list[list[int]] = []
    for start, end in sorted(gaps):
        if out and start <= out[-1][1]:
            out[-1][1] = max(out[-1][1], end)
        else:
            out.append([start, end])
    return [tuple(g) for g in out]
