"""End-to-end study orchestration: configuration, simulation, ingest,
dataset build and the study summary report."""

from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .codecs import decode_any
from .core import (
    IMAGE_CHANNELS,
    Channel,
    Gender,
    HealthRecord,
    IdentityMapping,
    SessionManifest,
    ValidationError,
    VitalsRecord,
    Zone,
    parse_key,
)
from .device import ButtonEvent, EncryptedDisk, Keyring, SessionConfig, default_channels, run_session, simulate_vitals
from .extractors import ExtractorRegistry
from .pipeline import Pipeline, PipelineFaults, PipelineReport, WorkerPool, load_record
from .rdb import Database, Dataset, GroupReader, Schema
from .store import ColdStore, ObjectStore
from .transfer import (
    CourierDevice,
    CourierState,
    TransferFaults,
    TransferReport,
    archive,
    ingest_courier,
    load_courier,
    load_manifests,
    manifest_path,
    ship_courier,
    upload_network,
    verify_all,
)

logger = logging.getLogger(__name__)

STUDY_EPOCH_MS = 1546300800000  # 2019-01-01T00:00:00Z
DAY_MS = 86_400_000
SESSION_START_OFFSET_MS = 9 * 3600 * 1000


# configuration -------------------------------------------------------------


@dataclass
class SubjectSpec:
    subject_id: str
    age: float
    gender: str
    weight: float
    height: float
    conditions: list[str] = field(default_factory=list)
    name: str | None = None  # identity only, never leaves the identity store


@dataclass
class StudyConfig:
    study_id: str = "chronic1"
    site_id: str = "siteA"
    ward_id: str = "W1"
    seed: int = 0
    subjects: list[SubjectSpec] = field(default_factory=list)
    sessions_per_subject: int = 1
    duration_s: float = 60.0
    scenario: list[ButtonEvent] = field(default_factory=list)
    channels: dict = field(default_factory=dict)
    vitals_rate: float = 2.0
    pipeline: dict = field(default_factory=dict)
    rdb: dict = field(default_factory=dict)

    _PIPELINE_KEYS = {"min_workers", "max_workers", "target_backlog_per_worker", "accelerated", "visibility_timeout", "max_deliveries", "scale_interval"}
    _RDB_KEYS = {"group_rows"}

    def validate(self) -> "StudyConfig":
        if not self.subjects:
            raise ValidationError("subjects", "at least one subject is required")
        ids = [s.subject_id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise ValidationError("subjects", "subject ids must be unique")
        for s in self.subjects:
            HealthRecord.from_exact(s.subject_id, s.age, s.gender, s.weight, s.height, s.conditions)
        if self.sessions_per_subject < 1:
            raise ValidationError("sessions_per_subject", "must be >= 1")
        if not self.duration_s > 0:
            raise ValidationError("duration_s", "must be positive")
        if not self.vitals_rate > 0:
            raise ValidationError("vitals_rate", "must be positive")
        try:
            default_channels(**self.channels)
        except (ValueError, TypeError) as exc:
            raise ValidationError("channels", str(exc)) from None
        for section, allowed in (("pipeline", self._PIPELINE_KEYS), ("rdb", self._RDB_KEYS)):
            unknown = set(getattr(self, section)) - allowed
            if unknown:
                raise ValidationError(section, f"unknown keys {sorted(unknown)}")
        try:
            WorkerPool(**{k: v for k, v in self.pipeline.items() if k in WorkerPool.__dataclass_fields__})
        except ValueError as exc:
            raise ValidationError("pipeline", str(exc)) from None
        if self.rdb.get("group_rows", 1000) < 1:
            raise ValidationError("rdb", "group_rows must be >= 1")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__ if not f.startswith("_")}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(sorted(unknown)[0], "unknown config field")
        subjects = d.pop("subjects", 5)
        seed = d.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise ValidationError("seed", f"must be an integer, got {seed!r}")
        if isinstance(subjects, int) and not isinstance(subjects, bool):
            if subjects < 1:
                raise ValidationError("subjects", "count must be >= 1")
            roster = generate_roster(subjects, seed)
        elif isinstance(subjects, list):
            try:
                roster = [SubjectSpec(**s) for s in subjects]
            except TypeError as exc:
                raise ValidationError("subjects", str(exc)) from None
        else:
            raise ValidationError("subjects", "must be a count or a roster list")
        try:
            scenario = [ButtonEvent(*e) if isinstance(e, (list, tuple)) else ButtonEvent(**e) for e in d.pop("scenario", [])]
        except (TypeError, ValueError) as exc:
            raise ValidationError("scenario", str(exc)) from None
        for name in ("duration_s", "vitals_rate"):
            if name in d and (isinstance(d[name], bool) or not isinstance(d[name], (int, float))):
                raise ValidationError(name, f"must be a number, got {d[name]!r}")
        return cls(subjects=roster, scenario=scenario, **d).validate()

    @classmethod
    def from_file(cls, path) -> "StudyConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError("config", f"not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ValidationError("config", "top level must be an object")
        return cls.from_dict(data)

    def sessions(self):
        """(subject index, subject, session id, start ms), one session per study day."""
        day = 0
        for i, s in enumerate(self.subjects):
            for j in range(self.sessions_per_subject):
                yield i, s, f"sess-{j + 1:02d}", STUDY_EPOCH_MS + day * DAY_MS + SESSION_START_OFFSET_MS
                day += 1


def generate_roster(count: int, seed: int) -> list[SubjectSpec]:
    rng = random.Random(f"roster/{seed}")
    conditions = ["copd", "chf", "diabetes", "hypertension"]
    out = []
    for i in range(count):
        out.append(
            SubjectSpec(
                subject_id=f"S{i + 1:03d}",
                age=rng.randint(40, 89),
                gender=rng.choice([Gender.FEMALE.value, Gender.MALE.value]),
                weight=round(rng.uniform(50, 110), 1),
                height=round(rng.uniform(150, 195), 1),
                conditions=sorted(rng.sample(conditions, rng.randint(1, 2))),
                name=f"Participant {i + 1}",
            )
        )
    return out


def _sub_seed(seed: int, *parts) -> int:
    h = hashlib.sha256("/".join([str(seed), *map(str, parts)]).encode()).digest()
    return int.from_bytes(h[:8], "big")


# health and identity stores --------------------------------------------------


class HealthStore:
    """Research-visible, bucketed health records, one JSON file."""

    def __init__(self, root):
        self.root = Path(root)
        self.file = self.root / "subjects.json"

    def save(self, records: list[HealthRecord]) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        data = [r.to_dict() for r in sorted(records, key=lambda r: r.subject_id)]
        self.file.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")

    def load(self) -> list[HealthRecord]:
        if not self.file.exists():
            return []
        return [HealthRecord(**d) for d in json.loads(self.file.read_text())]


class IdentityStore:
    """Encrypted subject-id to personal-details mapping, kept apart from
    research data. The key lives in a separate file."""

    def __init__(self, root, key: bytes):
        self.root = Path(root)
        self.aead = AESGCM(key)

    def put(self, subject_id: str, details: dict) -> IdentityMapping:
        nonce = hashlib.sha256(f"identity/{subject_id}".encode()).digest()[:12]
        blob = nonce + self.aead.encrypt(nonce, json.dumps(details, sort_keys=True).encode(), subject_id.encode())
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / f"{subject_id}.bin").write_bytes(blob)
        return IdentityMapping(subject_id, blob)

    def get(self, subject_id: str) -> dict:
        blob = (self.root / f"{subject_id}.bin").read_bytes()
        return json.loads(self.aead.decrypt(blob[:12], blob[12:], subject_id.encode()))


# simulate --------------------------------------------------------------------


@dataclass
class SimulationResult:
    out_dir: Path
    manifests: list[SessionManifest]
    disks: list[str]


def simulate_study(config: StudyConfig, out_dir, time_scale: float = 0.0) -> SimulationResult:
    """Record every session of the study onto sealed disks under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    keyring = Keyring(out / "keys" / "keyring.json")
    channels = default_channels(**config.channels)
    manifests, disks = [], []
    for i, subject, session_id, start in config.sessions():
        sc = SessionConfig(
            study_id=config.study_id,
            site_id=config.site_id,
            subject_id=subject.subject_id,
            ward_id=config.ward_id,
            device_id=f"D{i % 4 + 1}",
            session_id=session_id,
            channels=channels,
            clock_start_ms=start,
        )
        seed = _sub_seed(config.seed, subject.subject_id, session_id)
        disk_id = f"{sc.device_id}-{sc.subject_id}-{sc.session_id}"
        m, disk = run_session(
            sc, config.duration_s, config.scenario, seed, disk_root=out / "disks" / disk_id, keyring=keyring, time_scale=time_scale
        )
        vdisk_id = f"vitals-{sc.device_id}-{sc.subject_id}-{sc.session_id}"
        vm, vdisk = simulate_vitals(
            sc, config.duration_s, rate=config.vitals_rate, seed=seed, disk_root=out / "disks" / vdisk_id, keyring=keyring
        )
        for man, d in ((m, disk), (vm, vdisk)):
            target = out / manifest_path(man)
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(man.to_json())
            manifests.append(man)
            disks.append(d.disk_id)
    HealthStore(out / "health").save(
        [HealthRecord.from_exact(s.subject_id, s.age, s.gender, s.weight, s.height, s.conditions) for s in config.subjects]
    )
    key_file = out / "keys" / "identity.key"
    key = hashlib.sha256(f"identity-key/{config.seed}".encode()).digest()
    key_file.write_bytes(key)
    ids = IdentityStore(out / "identity", key)
    for s in config.subjects:
        ids.put(s.subject_id, {"name": s.name, "age": s.age, "weight": s.weight, "height": s.height})
    (out / "study.json").write_text(
        json.dumps({"study_id": config.study_id, "rdb": config.rdb, "pipeline": config.pipeline}, indent=1, sort_keys=True) + "\n"
    )
    return SimulationResult(out, manifests, disks)


# ingest --------------------------------------------------------------------


@dataclass
class IngestFaults:
    interrupt_after: int | None = None  # network link drops once after this many items
    corrupt: list[str] = field(default_factory=list)
    crash_fraction: float = 0.0
    crash_stages: list[str] = field(default_factory=lambda: ["extract"])
    seed: int = 0
    courier_lost: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "IngestFaults":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(sorted(unknown)[0], "unknown fault plan field")
        return cls(**d)

    def pipeline(self) -> PipelineFaults:
        return PipelineFaults(crash_fraction=self.crash_fraction, stages=tuple(self.crash_stages), seed=self.seed)


@dataclass
class IngestResult:
    transfers: list[TransferReport]
    pipeline: PipelineReport
    interruptions: int
    archived: int
    verified: int
    missing: list[str]
    mismatched: list[str]
    quarantined: list[str]
    lost_keys: list[str]

    @property
    def data_loss(self) -> int:
        return len(set(self.lost_keys) | set(self.quarantined) | set(self.missing) | set(self.mismatched))

    def to_dict(self) -> dict:
        return {
            "data_loss": self.data_loss,
            "lost_keys": self.lost_keys,
            "quarantined": self.quarantined,
            "missing": self.missing,
            "mismatched": self.mismatched,
            "interruptions": self.interruptions,
            "archived": self.archived,
            "verified": self.verified,
            "transfers": [
                {k: v for k, v in t.to_dict().items() if k != "statuses"} for t in self.transfers
            ],
            "pipeline": self.pipeline.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def _disks(in_dir: Path) -> list[EncryptedDisk]:
    root = in_dir / "disks"
    if not root.exists():
        return []
    return [EncryptedDisk.open(p) for p in sorted(root.iterdir()) if p.is_dir()]


def ingest_study(
    in_dir,
    store_root,
    *,
    mode: str = "network",
    faults: IngestFaults | None = None,
    dual_courier: bool = False,
    registry: ExtractorRegistry | None = None,
    pipeline_params: dict | None = None,
) -> IngestResult:
    in_dir, store_root = Path(in_dir), Path(store_root)
    faults = faults or IngestFaults()
    if mode not in ("network", "courier"):
        raise ValidationError("mode", f"must be network or courier, got {mode!r}")
    if not list((in_dir / "manifests").rglob("*.json")):
        raise ValidationError("in", f"no manifests under {in_dir}")
    if pipeline_params is None and (in_dir / "study.json").exists():
        pipeline_params = json.loads((in_dir / "study.json").read_text()).get("pipeline", {})
    params = dict(pipeline_params or {})
    pool = WorkerPool(**{k: params.pop(k) for k in list(params) if k in WorkerPool.__dataclass_fields__})
    keyring = Keyring(in_dir / "keys" / "keyring.json")
    store = ObjectStore(store_root)
    pipeline = Pipeline(store, registry, pool=pool, **params)
    disks = _disks(in_dir)
    transfers = []
    interruptions = 0
    tfaults = TransferFaults(interrupt_after=faults.interrupt_after, corrupt=frozenset(faults.corrupt))
    if mode == "network":
        for disk in disks:
            report = upload_network(disk, store, keyring, faults=tfaults)
            transfers.append(report)
            if report.interrupted:
                interruptions += 1
                tfaults = TransferFaults(corrupt=tfaults.corrupt)  # the link drops once
                report = upload_network(disk, store, keyring, faults=tfaults)
                transfers.append(report)
    else:
        primary = CourierDevice("courier-A")
        twin = CourierDevice("courier-B") if dual_courier else None
        for disk in disks:
            load_courier(disk, primary)
            if twin is not None:
                load_courier(disk, twin)
        ship_courier(primary, CourierState.LOST if faults.courier_lost else CourierState.ARRIVED)
        if twin is not None:
            ship_courier(twin, CourierState.ARRIVED)
        transfers.append(ingest_courier(primary, store, keyring, twin=twin, faults=tfaults))
    report = pipeline.run_until_drained(faults.pipeline())
    cold = ColdStore(store_root / "cold")
    archived = archive(store, cold)
    manifests = [SessionManifest.from_json(p.read_text()) for p in sorted((in_dir / "manifests").rglob("*.json"))]
    check = verify_all(manifests, store)
    lost = sorted({k for t in transfers for k in t.lost_keys})
    quarantined = sorted({p for t in transfers for p in t.quarantined})
    quarantined = [p for p in quarantined if not store.exists(p)]
    for sub in ("health", "identity"):
        src = in_dir / sub
        if src.exists():
            dst = store_root / sub
            dst.mkdir(parents=True, exist_ok=True)
            for f in sorted(src.iterdir()):
                (dst / f.name).write_bytes(f.read_bytes())
    if (in_dir / "study.json").exists():
        (store_root / "study.json").write_bytes((in_dir / "study.json").read_bytes())
    return IngestResult(
        transfers=transfers,
        pipeline=report,
        interruptions=interruptions,
        archived=archived,
        verified=check.checked,
        missing=check.missing,
        mismatched=check.mismatched,
        quarantined=quarantined,
        lost_keys=lost,
    )


# dataset build -------------------------------------------------------------

FRAME_SCHEMA = Schema(
    [
        ("item_key", "string"),
        ("subject_id", "string"),
        ("session_id", "string"),
        ("channel", "string"),
        ("sequence", "int64"),
        ("ts", "timestamp"),
        ("width", "int64"),
        ("height", "int64"),
        ("bed_region", "box4"),
        ("person_region", "box4"),
        ("mean_brightness", "float64"),
        ("motion_energy", "float64"),
        ("payload", "bytes"),
    ]
)
AUDIO_SCHEMA = Schema(
    [
        ("item_key", "string"),
        ("subject_id", "string"),
        ("session_id", "string"),
        ("sequence", "int64"),
        ("ts", "timestamp"),
        ("audio_rms", "float64"),
        ("payload", "bytes"),
    ]
)
VITALS_SCHEMA = Schema(
    [
        ("item_key", "string"),
        ("subject_id", "string"),
        ("session_id", "string"),
        ("sequence", "int64"),
        ("ts", "timestamp"),
        ("hr", "float64"),
        ("rr", "float64"),
        ("spo2", "float64"),
        ("bp_systolic", "float64"),
        ("bp_diastolic", "float64"),
    ]
)
SUBJECT_SCHEMA = Schema(
    [
        ("subject_id", "string"),
        ("age_range", "string"),
        ("gender", "string"),
        ("weight_range", "string"),
        ("height_range", "string"),
        ("conditions", "string"),
        ("sessions", "int64"),
    ]
)
# one row per ingested item across every channel, for cross-channel counts
ITEM_SCHEMA = Schema(
    [
        ("item_key", "string"),
        ("subject_id", "string"),
        ("session_id", "string"),
        ("channel", "string"),
        ("sequence", "int64"),
        ("ts", "timestamp"),
        ("size", "int64"),
    ]
)
SCHEMAS = {"frames": FRAME_SCHEMA, "audio": AUDIO_SCHEMA, "vitals": VITALS_SCHEMA, "subjects": SUBJECT_SCHEMA, "items": ITEM_SCHEMA}


def _feature(record, name):
    slot = record.features.get(name)
    if slot is None or slot["status"] != "computed":
        return None
    v = slot["value"]
    return tuple(v) if isinstance(v, list) else v


def _existing(ds: Dataset, column: str) -> set:
    """Values of ``column`` in the latest snapshot and in staging."""
    seen = set()
    for g in list(ds.snapshot().groups) + ds.staged():
        seen.update(v for v in GroupReader(ds.group_path(g.id)).column(column).to_list())
    return seen


def _study_clock(store: ObjectStore):
    ends = [m.end for m in load_manifests(store)]
    stamp = max(ends, default=0)
    return lambda: stamp


def build_datasets(store_root, db_root, group_rows: int | None = None) -> dict[str, int]:
    """Stage rows for every ingested item not yet in its dataset. Returns rows
    staged per dataset; nothing is visible until :func:`publish_all`.

    ``group_rows`` defaults to the study config's ``rdb.group_rows``, then 1000."""
    if group_rows is None:
        study_file = Path(store_root) / "study.json"
        rdb = json.loads(study_file.read_text()).get("rdb", {}) if study_file.exists() else {}
        group_rows = rdb.get("group_rows", 1000)
    store = ObjectStore(store_root)
    db = Database(db_root, clock=_study_clock(store))
    sets = {n: db.open(n) if n in db else db.create_dataset(n, s, group_rows) for n, s in SCHEMAS.items()}
    rows: dict[str, list] = {n: [] for n in SCHEMAS}
    done = {n: _existing(sets[n], "item_key") for n in ("frames", "audio", "vitals", "items")}
    manifests = sorted(load_manifests(store), key=lambda m: (m.subject_id, m.session_id, m.device_id))
    sessions: dict[str, int] = {}
    for m in manifests:
        if not m.device_id.startswith("vitals-"):
            sessions[m.subject_id] = sessions.get(m.subject_id, 0) + 1
        for path in sorted(m.checksums):
            if not store.exists(path):
                continue
            key = parse_key(path)
            base = {"item_key": path, "subject_id": key.subject_id, "session_id": key.session_id, "sequence": key.sequence, "ts": m.timestamps.get(path)}
            if path not in done["items"]:
                rows["items"].append(base | {"channel": key.channel.value, "size": m.sizes[path]})
            if key.channel is Channel.VITALS:
                if path not in done["vitals"]:
                    rec = VitalsRecord.from_csv(store.get(path))
                    rows["vitals"].append(
                        base | {"hr": rec.hr, "rr": rec.rr, "spo2": rec.spo2, "bp_systolic": rec.bp_systolic, "bp_diastolic": rec.bp_diastolic}
                    )
                continue
            target = "frames" if key.channel in IMAGE_CHANNELS else "audio"
            if path in done[target]:
                continue
            try:
                record = load_record(store, path)
            except KeyError:
                continue  # not processed; stays out of the research datasets
            payload = store.get(record.location)
            if target == "audio":
                rows["audio"].append(base | {"audio_rms": _feature(record, "audio_rms"), "payload": payload})
            else:
                shape = decode_any(payload).shape
                rows["frames"].append(
                    base
                    | {
                        "channel": key.channel.value,
                        "width": shape[1],
                        "height": shape[0],
                        "bed_region": _feature(record, "bed_region"),
                        "person_region": _feature(record, "person_region"),
                        "mean_brightness": _feature(record, "mean_brightness"),
                        "motion_energy": _feature(record, "motion_energy"),
                        "payload": payload,
                    }
                )
    have_subjects = _existing(sets["subjects"], "subject_id")
    for h in HealthStore(Path(store_root) / "health").load():
        if h.subject_id in have_subjects:
            continue
        d = h.to_dict()
        d["conditions"] = ";".join(d["conditions"])
        rows["subjects"].append(d | {"sessions": sessions.get(h.subject_id, 0)})
    order = {
        "subjects": lambda r: r["subject_id"],
        "frames": lambda r: (r["subject_id"], r["session_id"], r["channel"], r["sequence"]),
    }
    staged = {}
    for name, batch in rows.items():
        batch.sort(key=order.get(name, lambda r: (r["subject_id"], r["session_id"], r.get("channel", ""), r["sequence"])))
        result = sets[name].append_rows(batch)
        if result.rejected:
            raise ValidationError(name, f"{len(result.rejected)} rows rejected, first: {result.rejected[0]}")
        staged[name] = result.staged
    return staged


def publish_all(store_root, db_root, names=None) -> dict[str, int]:
    db = Database(db_root, clock=_study_clock(ObjectStore(store_root)))
    return {n: db.open(n).publish().snapshot_id for n in (names or db.names())}


def dataset_digests(db_root) -> dict[str, str]:
    db = Database(db_root)
    return {n: db.open(n).digest() for n in db.names()}


# report ----------------------------------------------------------------------

REFERENCE_TABLE = {
    "recruited_subjects": 453,
    "completed_subjects": 363,
    "total_images": 11_132_486,
    "study_days": 75,
    "storage": "2 TB",
}
REFERENCE_NOTE = "Completed-subject reference is 363; another account of the same study gives 369."


@dataclass
class StudyReport:
    recruited_subjects: int = 0
    completed_subjects: int = 0
    total_images: int = 0
    study_days: int = 0
    storage_bytes: int = 0
    images_by_channel: dict[str, int] = field(default_factory=dict)
    audio_items: int = 0
    vitals_samples: int = 0
    sessions: int = 0
    images_in_store: int = 0

    @property
    def consistent(self) -> bool:
        return self.images_in_store == self.total_images

    def to_dict(self) -> dict:
        return asdict(self) | {"consistent": self.consistent, "reference": REFERENCE_TABLE, "reference_note": REFERENCE_NOTE}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def table(self) -> str:
        rows = [
            ("Recruited subjects", f"{self.recruited_subjects:,}", f"{REFERENCE_TABLE['recruited_subjects']:,}"),
            ("Completed subjects", f"{self.completed_subjects:,}", f"{REFERENCE_TABLE['completed_subjects']:,} *"),
            ("Total images", f"{self.total_images:,}", f"{REFERENCE_TABLE['total_images']:,}"),
            ("Study days", f"{self.study_days:,}", f"{REFERENCE_TABLE['study_days']:,}"),
            ("Storage", human_bytes(self.storage_bytes), REFERENCE_TABLE["storage"]),
        ]
        w0 = max(len(r[0]) for r in rows)
        w1 = max(len(r[1]) for r in rows + [("", "this run", "")])
        lines = [f"{'':<{w0}}  {'this run':>{w1}}  reference", "-" * (w0 + w1 + 13)]
        lines += [f"{a:<{w0}}  {b:>{w1}}  {c}" for a, b, c in rows]
        lines.append(f"* {REFERENCE_NOTE}")
        return "\n".join(lines)


def human_bytes(n: int) -> str:
    for unit in ("B", "KB", "MB", "GB", "TB", "PB"):
        if n < 1000 or unit == "PB":
            return f"{n:.0f} {unit}" if unit == "B" else f"{n:.2f} {unit}"
        n /= 1000
    return f"{n} B"


def study_report(store_root) -> StudyReport:
    """Summary figures from the manifests and raw zone of an ingested store.

    A subject is completed when every item of every session it recorded is
    present and intact in the raw zone."""
    root = Path(store_root)
    report = StudyReport()
    report.recruited_subjects = len(HealthStore(root / "health").load())
    if not (root / "objects").exists():
        return report
    store = ObjectStore(root)
    manifests = load_manifests(store)
    raw = store.raw_keys()
    raw_set = set(raw)
    by_channel: dict[str, int] = {}
    days = set()
    subjects: dict[str, bool] = {}
    for m in manifests:
        if not m.device_id.startswith("vitals-"):
            report.sessions += 1
            days.add(datetime.fromtimestamp(m.start / 1000, tz=timezone.utc).date())
        intact = all(p in raw_set for p in m.checksums)
        subjects[m.subject_id] = subjects.get(m.subject_id, True) and intact
        for ch, summary in m.channels.items():
            if Channel(ch) in IMAGE_CHANNELS:
                by_channel[ch] = by_channel.get(ch, 0) + summary.item_count
            elif ch == Channel.AUDIO.value:
                report.audio_items += summary.item_count
            else:
                report.vitals_samples += summary.item_count
    report.images_by_channel = dict(sorted(by_channel.items()))
    report.total_images = sum(by_channel.values())
    report.completed_subjects = sum(subjects.values())
    report.study_days = len(days)
    report.storage_bytes = sum(store.size(p) for p in raw)
    report.images_in_store = sum(1 for p in raw if parse_key(p).channel in IMAGE_CHANNELS and parse_key(p).zone is Zone.RAW)
    return report
