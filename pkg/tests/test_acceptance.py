"""Acceptance suite. Each test records a PASS/FAIL line through the
``criterion`` fixture (printed in the terminal summary) and then asserts."""

import io
import math
import random
import time
from collections import Counter

import numpy as np
from PIL import Image

from avstudy import codecs
from avstudy.client import CacheSpec, NGramSpec, ShuffleSpec, StreamSpec, default_registry, encode_unit, open_stream
from avstudy.core import Zone, parse_key
from avstudy.device import Keyring, SessionConfig, default_channels, run_session
from avstudy.pipeline import Pipeline, PipelineFaults, WorkerPool, load_record
from avstudy.rdb import Compare, Database, PublishCrash, parse
from avstudy.store import ObjectStore
from avstudy.study import StudyConfig, build_datasets, dataset_digests, ingest_study, publish_all, simulate_study, study_report
from avstudy.transfer import (
    CourierDevice,
    TransferFaults,
    ingest_courier,
    load_courier,
    ship_courier,
    upload_network,
    verify,
)
from rdb_support import SCHEMA, canonical, compile_oracle, make_rows, random_predicate

GIB = 1024**3
IR_ONLY = default_channels(wide=None, narrow=None, depth=None, audio=None)


def test_criterion_01_hourly_volume(criterion):
    t0 = time.perf_counter()
    m, _ = run_session(SessionConfig(), 3600, seed=1, materialize=False, tick_seconds=60)
    wall = time.perf_counter() - t0
    gib = m.modeled_bytes / GIB
    ok = abs(gib - 7) <= 0.7 and wall < 10
    criterion(1, "1 h session volume within 7 GiB +-10% in < 10 s", ok, f"{gib:.3f} GiB, {wall:.2f} s")
    assert ok


def test_criterion_02_frame_rates(criterion):
    m, _ = run_session(SessionConfig(), 60, seed=2, materialize=False)
    counts = {ch: s.item_count for ch, s in m.channels.items()}
    ok = counts["ir"] == 480 and counts["wide"] == 1500 and counts["depth"] == 1500
    criterion(2, "60 s session yields 480 IR and 1500 wide/depth items", ok, str(counts))
    assert ok


def test_criterion_03_zero_loss_under_faults(criterion, tmp_path):
    t0 = time.perf_counter()
    keyring = Keyring()
    # 125 s of IR at 8 fps is exactly 1000 items
    m, disk = run_session(SessionConfig(channels=IR_ONLY), 125, seed=3, keyring=keyring)
    assert len(m.checksums) == 1000
    store = ObjectStore(tmp_path / "store")
    faults = PipelineFaults(crash_fraction=0.3, stages=("convert", "metadata", "extract"), seed=4)
    pipeline = Pipeline(store, faults=faults)
    first = upload_network(disk, store, keyring, faults=TransferFaults(interrupt_after=rng_cut(1000)))
    second = upload_network(disk, store, keyring)
    report = pipeline.run_until_drained()
    wall = time.perf_counter() - t0

    records = [load_record(store, k) for k in sorted(m.checksums)]
    complete = sum(r.complete for r in records)
    feature_files = [p for p in store.keys() if f"/{Zone.FEATURES.value}/" in p]
    lost = len(verify(m, store).missing) + (1000 - complete)
    duplicated = report.duplicate_commits + (len(feature_files) - len(set(feature_files)))
    ok = (
        first.interrupted
        and second.stored == 1000
        and report.completed == 1000
        and complete == 1000
        and len(feature_files) == 1000
        and lost == 0
        and duplicated == 0
        and report.conserved
        and report.crashes > 0
        and wall < 60
    )
    criterion(
        3,
        "1000 items, 30% crash plan and one interruption: all completed, none lost or duplicated, < 60 s",
        ok,
        f"completed {report.completed}, lost {lost}, duplicated {duplicated}, crashes {report.crashes}, {wall:.1f} s",
    )
    assert ok


def rng_cut(n: int) -> int:
    return random.Random(99).randrange(1, n)


def test_criterion_04_courier_risk(criterion, tmp_path):
    keyring = Keyring()
    m, disk = run_session(SessionConfig(channels=IR_ONLY), 5, seed=4, keyring=keyring)
    keys = sorted(m.checksums)

    single = ship_courier(load_courier(disk, CourierDevice("a")), "lost")
    rep1 = ingest_courier(single, ObjectStore(tmp_path / "s1"), keyring)
    a = ship_courier(load_courier(disk, CourierDevice("a2")), "lost")
    b = ship_courier(load_courier(disk, CourierDevice("b2")), "arrived")
    store2 = ObjectStore(tmp_path / "s2")
    rep2 = ingest_courier(a, store2, keyring, twin=b)

    covered = len(rep1.loss.keys) / len(keys) if rep1.loss else 0.0
    ok = rep1.loss is not None and sorted(rep1.loss.keys) == keys and rep2.lost_keys == [] and verify(m, store2).ok
    criterion(4, "single courier lost loses 100% of keys, dual courier loses none", ok, f"single {covered:.0%}, dual {len(rep2.lost_keys)}")
    assert ok


def _random_tiff(rng: np.random.Generator, i: int) -> tuple[bytes, np.ndarray]:
    h, w = int(rng.integers(1, 48)), int(rng.integers(1, 48))
    kind = i % 5
    if kind == 0:
        px = rng.integers(0, 256, (h, w), dtype=np.uint8)
    elif kind == 1:
        px = rng.integers(0, 65536, (h, w), dtype=np.uint16)
    elif kind == 2:
        px = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
    elif kind == 3:
        px = rng.integers(0, 65536, (h, w, 3), dtype=np.uint16)
    else:
        # written by an independent encoder, with several strips
        px = rng.integers(0, 256, (h, w, 3) if i % 2 else (h, w), dtype=np.uint8)
        buf = io.BytesIO()
        Image.fromarray(px).save(buf, format="TIFF", rowsperstrip=max(1, h // 3))
        return buf.getvalue(), px
    return codecs.encode_tiff(px), px


def test_criterion_05_lossless_conversion(criterion, tmp_path):
    rng = np.random.default_rng(5)
    store = ObjectStore(tmp_path / "store")
    pipeline = Pipeline(store)
    originals = {}
    for i in range(500):
        data, px = _random_tiff(rng, i)
        path = f"chronic1/siteA/S001/sess-01/wide/raw/{i:06d}"
        store.put(path, data)
        originals[path] = ("tiff", data, px)
    for i in range(500):
        n = int(rng.integers(1, 6000))
        channels = 1 if i % 3 else 2
        samples = rng.integers(-32768, 32768, (n,) if channels == 1 else (n, 2), dtype=np.int16)
        if i % 4 == 0:
            samples = np.cumsum(samples // 64, axis=0, dtype=np.int16)  # smooth signals exercise prediction
        rate = int(rng.choice([8000, 16000, 44100]))
        data = codecs.encode_wav(samples, rate)
        path = f"chronic1/siteA/S001/sess-01/audio/raw/{i:06d}"
        store.put(path, data)
        originals[path] = ("wav", data, (samples, rate))
    report = pipeline.run_until_drained()

    bad = []
    for path, (kind, data, truth) in originals.items():
        converted = store.get(parse_key(path).in_zone(Zone.CONVERTED).serialize())
        if kind == "tiff":
            same = np.array_equal(codecs.decode_png(converted), codecs.decode_tiff(data)) and np.array_equal(
                codecs.decode_tiff(data), truth
            )
        else:
            got, got_rate = codecs.decode_flac(converted)
            want, want_rate = codecs.decode_wav(data)
            same = got_rate == want_rate and got.dtype == want.dtype and np.array_equal(got, want) and np.array_equal(want, truth[0])
        if not same:
            bad.append(path)
    ok = not bad and report.completed == 1000
    criterion(5, "500 TIFF and 500 WAV conversions are lossless", ok, f"{1000 - len(bad)}/1000 identical")
    assert ok


def test_criterion_06_rdb_oracle(criterion, tmp_path):
    rows = make_rows(50_000, subjects=50, seed=6)
    ds = Database(tmp_path).create_dataset("synthetic", SCHEMA, group_rows=1000)
    ds.append_rows(rows)
    ds.publish()
    cols = ["subject_id", "seq", "channel", "score", "ts", "flag", "region"]
    rng = random.Random(6)
    mismatches = 0
    for _ in range(200):
        pred = random_predicate(rng, depth=3, subjects=50)
        keep = compile_oracle(pred)
        want = canonical([r for r in rows if keep(r)], cols)
        if canonical(ds.scan(columns=cols, predicate=pred).rows, cols) != want:
            mismatches += 1
    skipped = []
    for s in range(50):
        st = ds.scan(columns=["seq"], predicate=Compare("subject_id", "=", f"S{s:03d}")).stats
        skipped.append(st.groups_skipped / st.groups_total)
    ok = mismatches == 0 and min(skipped) >= 0.5
    criterion(
        6,
        "200 random predicates over 50k rows equal the oracle; subject equality prunes >= 50% of row groups",
        ok,
        f"{200 - mismatches}/200 equal, min skip {min(skipped):.0%}",
    )
    assert ok


def test_criterion_07_snapshot_isolation(criterion, tmp_path):
    db = Database(tmp_path)
    ds = db.create_dataset("frames", SCHEMA)
    ds.append_rows(make_rows(1000, subjects=5, seed=7))
    ds.publish()
    pinned = ds.snapshot()
    ds.append_rows(make_rows(500, subjects=2, seed=8))
    ds.publish()
    reader_rows = len(ds.scan(pinned.snapshot_id, ["seq"]).rows)
    stream_rows = len(list(open_stream(db, StreamSpec(dataset="frames", snapshot=pinned.snapshot_id, columns=["seq"]))))
    isolated = reader_rows == stream_rows == 1000 and len(ds.scan(None, ["seq"]).rows) == 1500

    crash_ok = True
    for point in ("before_manifest", "before_rename", "after_rename"):
        before_id = ds.latest_id
        before = ds.digest(before_id)
        ds.append_rows(make_rows(100, subjects=1, seed=9))
        try:
            ds.publish(crash_at=point)
        except PublishCrash:
            pass
        ds.recover()
        crash_ok &= ds.digest(before_id) == before
        crash_ok &= len(ds.scan(before_id, ["seq"]).rows) == ds.snapshot(before_id).total_rows
        if point != "after_rename":
            crash_ok &= ds.latest_id == before_id
    ok = isolated and crash_ok
    criterion(7, "pinned readers never see later rows; crashed publishes leave prior digest unchanged", ok)
    assert ok


def test_criterion_08_count_by_query(criterion, tmp_path):
    # planted truth: per-subject duration and privacy pause
    plan = {"P01": (3.0, None), "P02": (5.0, (1.0, 3.0)), "P03": (8.0, None)}
    store_root, db_root = tmp_path / "store", tmp_path / "db"
    for sid, (duration, pause) in plan.items():
        scenario = [[pause[0], "privacy"], [pause[1], "privacy"]] if pause else []
        cfg = StudyConfig.from_dict(
            {
                "subjects": [{"subject_id": sid, "age": 60, "gender": "male", "weight": 80, "height": 175}],
                "duration_s": duration,
                "scenario": scenario,
                "seed": 8,
                "channels": {"narrow": None, "depth": None},
            }
        )
        simulate_study(cfg, tmp_path / sid)
        ingest_study(tmp_path / sid, store_root)
    build_datasets(store_root, db_root)
    publish_all(store_root, db_root)
    items = Database(db_root).open("items")
    table = items.count_by("subject_id", {"vitals": parse("channel = 'vitals'"), "wide": parse("channel = 'wide'")})

    want = []
    for sid, (duration, pause) in plan.items():
        active = duration - (pause[1] - pause[0] if pause else 0)
        want.append((sid, math.floor(duration * 2.0), math.floor(active * 25)))
    ok = table == want
    criterion(8, "count_by(subject) over vitals rows and wide frames matches planted counts", ok, str(table))
    assert ok


def test_criterion_09_streaming(criterion, tmp_path):
    db = Database(tmp_path / "db")
    ds = db.create_dataset("frames", SCHEMA, group_rows=400)
    rows = make_rows(6000, subjects=12, seed=9)
    ds.append_rows(rows)
    ds.publish()
    cols = ["subject_id", "seq", "ts", "channel", "region"]
    key = lambda u: (u["subject_id"], u["seq"])
    checks = {}

    runs = [[key(u) for u in open_stream(db, StreamSpec("frames", columns=cols, shuffle=ShuffleSpec(42, 500)))] for _ in range(2)]
    plain = [key(u) for u in open_stream(db, StreamSpec("frames", columns=cols))]
    checks["shuffle determinism"] = runs[0] == runs[1] and runs[0] != plain
    checks["permutation multiset"] = Counter(runs[0]) == Counter(plain) == Counter(key(r) for r in rows)

    pred = "seq < 300 and channel != 'audio'"
    n = 5
    keep = compile_oracle(parse(pred))
    per_group = Counter(r["subject_id"] for r in rows if keep(r))
    windows = list(open_stream(db, StreamSpec("frames", columns=cols, predicate=pred, ngram=NGramSpec(n, "subject_id", "ts"))))
    checks["ngram window count"] = len(windows) == sum(max(0, c - n + 1) for c in per_group.values())

    reg = default_registry()
    cached = StreamSpec(
        "frames", columns=cols, transforms=["drop_payload"], cache=CacheSpec(str(tmp_path / "cache")), shuffle=ShuffleSpec(1, 100)
    )
    s = open_stream(db, cached, reg)
    first = [encode_unit(u) for u in s]
    reg.reset_counters()
    second = [encode_unit(u) for u in s]
    checks["cache second pass"] = reg.total_invocations == 0 and first == second and s.cache_hit is True

    one = Counter(encode_unit(u) for u in open_stream(db, StreamSpec("frames", columns=cols, prefetch_workers=1)))
    four = Counter(encode_unit(u) for u in open_stream(db, StreamSpec("frames", columns=cols, prefetch_workers=4)))
    checks["prefetch multiset"] = one == four

    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    criterion(9, "streaming shuffle, ngram, cache and prefetch properties", ok, "all hold" if ok else f"failed: {failed}")
    assert ok


def _busy(tmp_path, accelerated: bool) -> float:
    keyring = Keyring()
    m, disk = run_session(SessionConfig(channels=default_channels(narrow=None)), 4, seed=10, keyring=keyring)
    store = ObjectStore(tmp_path)
    pipeline = Pipeline(store, pool=WorkerPool(accelerated=accelerated))
    upload_network(disk, store, keyring)
    return pipeline.run_until_drained().worker_busy_s


def test_criterion_10_accelerated_cost(criterion, tmp_path):
    cpu, acc = _busy(tmp_path / "cpu", False), _busy(tmp_path / "acc", True)
    ratio = cpu / acc
    ok = 10 <= ratio <= 60
    criterion(10, "accelerated busy time is 10-60x lower", ok, f"{ratio:.1f}x")
    assert ok


def _e2e(root):
    t0 = time.perf_counter()
    cfg = StudyConfig.from_dict({"subjects": 5, "duration_s": 60, "seed": 2019})
    simulate_study(cfg, root / "sim")
    ingest_study(root / "sim", root / "store")
    build_datasets(root / "store", root / "db")
    publish_all(root / "store", root / "db")
    report = study_report(root / "store").to_dict()
    return report, dataset_digests(root / "db"), time.perf_counter() - t0


def test_criterion_11_end_to_end_determinism(criterion, tmp_path):
    r1, d1, t1 = _e2e(tmp_path / "run1")
    r2, d2, t2 = _e2e(tmp_path / "run2")
    images = 5 * (1500 + 1500 + 1500 + 480)
    ok = r1 == r2 and d1 == d2 and len(d1) >= 4 and r1["total_images"] == images and max(t1, t2) < 120
    criterion(
        11,
        "two seeded end-to-end runs give identical report and digests; 5 subjects < 2 min",
        ok,
        f"images {r1['total_images']}, runs {t1:.0f} s and {t2:.0f} s",
    )
    assert ok
