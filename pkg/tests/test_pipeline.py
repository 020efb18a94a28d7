import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avstudy import codecs
from avstudy.core import Channel, Zone, parse_key
from avstudy.device import Keyring, SessionConfig, default_channels, planted_truth, run_session, simulate_vitals
from avstudy.extractors import ExtractorRegistry, ExtractorSpec
from avstudy.pipeline import (
    COMPUTED,
    EMPTY,
    FeatureRecord,
    Pipeline,
    PipelineFaults,
    UnknownObjectError,
    WorkerPool,
    autoscale,
    load_record,
    record_path,
)
from avstudy.queue import DurableQueue
from avstudy.store import ObjectStore
from avstudy.transfer import upload_network

WIDE_AUDIO = default_channels(narrow=None, depth=None, ir=None)
IR_ONLY = default_channels(wide=None, narrow=None, depth=None, audio=None)


def _ingest(root, channels, seconds, seed=5, vitals=False, **pipeline_kw):
    store = ObjectStore(root)
    pipeline = Pipeline(store, **pipeline_kw)
    keyring = Keyring()
    cfg = SessionConfig(channels=channels)
    m, disk = run_session(cfg, seconds, seed=seed, keyring=keyring)
    upload_network(disk, store, keyring)
    if vitals:
        _, vdisk = simulate_vitals(cfg, seconds, seed=seed, keyring=keyring)
        upload_network(vdisk, store, keyring)
    return store, pipeline, m


def _records(store):
    return {p: store.get(p) for p in store.keys() if "/features/" in p}


# queue ----------------------------------------------------------------------


class Clock:
    def __init__(self):
        self.t = 0.0

    def __call__(self):
        return self.t


def test_queue_redelivers_after_visibility_timeout():
    clock = Clock()
    q = DurableQueue("q", clock, visibility_timeout=30, max_deliveries=3)
    q.send({"k": 1})
    (m1,) = q.receive()
    assert q.receive() == []
    clock.t = 30
    (m2,) = q.receive()
    assert m2.delivery_count == 2
    assert not q.delete(m1.receipt_handle)  # stale receipt
    assert q.delete(m2.receipt_handle)
    assert len(q) == 0


def test_queue_dead_letters_after_max_deliveries():
    clock = Clock()
    q = DurableQueue("q", clock, visibility_timeout=1, max_deliveries=2)
    q.send({"k": 1})
    for _ in range(2):
        (m,) = q.receive()
        q.fail(m.receipt_handle, "boom")
        clock.t += 1
    assert q.receive() == []
    assert [d.reason for d in q.dead_letter] == ["boom"]
    assert len(q) == 0


def test_queue_dedup():
    q = DurableQueue("q", Clock())
    assert q.send({"k": 1}, dedup_key="a")
    assert q.send({"k": 1}, dedup_key="a") is None
    assert q.depth == 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["send", "recv", "ack", "tick"]), max_size=60), st.integers(1, 4))
def test_queue_never_loses_messages(ops, max_deliveries):
    clock = Clock()
    q = DurableQueue("q", clock, visibility_timeout=5, max_deliveries=max_deliveries)
    sent, acked, held = set(), set(), []
    for op in ops:
        if op == "send":
            sent.add(q.send({}))
        elif op == "recv":
            held += q.receive(2)
        elif op == "ack" and held:
            m = held.pop(0)
            if q.delete(m.receipt_handle):
                acked.add(m.message_id)
        else:
            clock.t += 3
    dead = {d.message_id for d in q.dead_letter}
    assert len(q) + len(acked) + len(dead) == len(sent)
    assert not acked & dead
    assert all(d.delivery_count == max_deliveries for d in q.dead_letter)


# autoscale ----------------------------------------------------------------------


@pytest.mark.parametrize("depth, expected", [(0, 0), (1000, 16), (100, 2), (101, 3)])
def test_autoscale_examples(depth, expected):
    assert autoscale(WorkerPool(min_workers=0, max_workers=16, target_backlog_per_worker=50), depth) == expected


def test_autoscale_logs_decisions():
    pool = WorkerPool(min_workers=1)
    autoscale(pool, 0, now=5.0)
    assert pool.log == [(5.0, 0, 1)]


@given(st.integers(0, 5000), st.integers(0, 5000), st.integers(0, 4), st.integers(1, 20), st.integers(1, 100))
def test_autoscale_monotone_and_bounded(d1, d2, lo, span, target):
    pool = WorkerPool(min_workers=lo, max_workers=lo + span, target_backlog_per_worker=target)
    a, b = autoscale(pool, min(d1, d2)), autoscale(pool, max(d1, d2))
    assert a <= b
    assert lo <= a <= lo + span and lo <= b <= lo + span


# stages ----------------------------------------------------------------------------


def test_on_object_created_is_idempotent_and_guarded(tmp_path):
    store = ObjectStore(tmp_path)
    pipeline = Pipeline(store, subscribe=False)
    path = "chronic1/siteA/S001/sess-01/ir/raw/000000"
    with pytest.raises(UnknownObjectError):
        pipeline.on_object_created(path)
    store.put(path, b"x")
    assert pipeline.on_object_created(path)
    assert pipeline.on_object_created(path) is None
    assert pipeline.entry.depth == 1
    with pytest.raises(UnknownObjectError):
        pipeline.on_object_created("chronic1/siteA/S001/sess-01/ir/converted/000000")


def test_stages_step_by_step(tmp_path):
    store, p, _ = _ingest(tmp_path, WIDE_AUDIO, 1)
    assert p.entry.depth == 26
    raw_before = {k: store.get(k) for k in store.raw_keys()}
    for msg in p.entry.receive(100):
        converted = p.convert_format(msg)
        assert parse_key(converted).zone is Zone.CONVERTED
        src = codecs.decode_any(store.get(msg.body["key"]))
        assert np.array_equal(codecs.decode_any(store.get(converted)), src)
    assert p.entry.depth == 0 and p.metadata.depth == 26
    for msg in p.metadata.receive(100):
        rec = p.generate_metadata(msg)
        assert all(f["status"] == EMPTY for f in rec.features.values())
        expected = 4 if parse_key(rec.item_key).channel is Channel.WIDE else 1
        assert len(rec.features) == expected
    for msg in p.processing.receive(100):
        rec = p.extract_features(msg)
        assert rec.complete
    assert {k: store.get(k) for k in store.raw_keys()} == raw_before
    assert store.violations == []


def test_conversion_is_byte_identical_on_retry(tmp_path):
    store, p, _ = _ingest(tmp_path, WIDE_AUDIO, 1)
    msgs = p.entry.receive(100)
    first = {m.body["key"]: store.get(p._convert(m)) for m in msgs}
    second = {m.body["key"]: store.get(p._convert(m)) for m in msgs}
    assert first == second
    assert p.metadata.stats.sent == len(msgs)


def test_template_with_zero_extractors(tmp_path):
    store, p, _ = _ingest(tmp_path, IR_ONLY, 0.5, registry=ExtractorRegistry())
    report = p.run_until_drained()
    assert report.completed == 4
    rec = load_record(store, store.raw_keys()[0])
    assert rec.features == {} and rec.complete


def test_metadata_redelivery_keeps_one_record(tmp_path):
    store, p, _ = _ingest(tmp_path, IR_ONLY, 0.5)
    for m in p.entry.receive(10):
        p.convert_format(m)
    msgs = p.metadata.receive(10)
    for m in msgs:
        p._template(m)
    snapshot = _records(store)
    for m in msgs:
        p._template(m)
    assert _records(store) == snapshot
    assert p.processing.stats.sent == 4


def test_extracted_values_match_planted_truth(tmp_path):
    store, p, m = _ingest(tmp_path, WIDE_AUDIO, 2, seed=11)
    report = p.run_until_drained()
    assert report.completed == len(m.checksums) and report.failed_features == 0
    channels = default_channels()
    for path in m.checksums:
        key = parse_key(path)
        cfg = channels[key.channel]
        truth = planted_truth(cfg, 11, key.session_id, key.sequence)
        f = load_record(store, path).features
        assert all(slot["status"] == COMPUTED for slot in f.values())
        if key.channel is Channel.AUDIO:
            assert abs(f["audio_rms"]["value"] - truth["amplitude"] / math.sqrt(2)) <= 1e-6
        else:
            assert tuple(f["person_region"]["value"]) == truth["person_region"]
            assert tuple(f["bed_region"]["value"]) == truth["bed_region"]
            px = codecs.decode_any(store.get(path))
            assert f["mean_brightness"]["value"] == pytest.approx(float(px.mean()))
            if key.sequence == 0:
                assert f["motion_energy"]["value"] == 0.0
            else:
                prev = codecs.decode_any(store.get(key.__class__(*[*path.split("/")[:6], key.sequence - 1]).serialize()))
                expect = np.abs(px.astype(float) - prev.astype(float)).mean()
                assert f["motion_energy"]["value"] == pytest.approx(expect)


def test_record_timestamps_come_from_manifest(tmp_path):
    store, p, m = _ingest(tmp_path, IR_ONLY, 1)
    p.run_until_drained()
    for path, ts in m.timestamps.items():
        assert load_record(store, path).timestamp == ts


def test_truncated_tiff_is_dead_lettered(tmp_path):
    store = ObjectStore(tmp_path)
    p = Pipeline(store, max_deliveries=3)
    good = codecs.encode_tiff(np.zeros((4, 4), dtype=np.uint8))
    store.put("chronic1/siteA/S001/sess-01/ir/raw/000000", good)
    store.put("chronic1/siteA/S001/sess-01/ir/raw/000001", good[:-5])
    report = p.run_until_drained()
    assert report.completed == 1 and report.dead_lettered == 1
    (dead,) = report.dead_letters
    assert dead["key"].endswith("000001") and dead["deliveries"] == 3 and "CodecError" in dead["reason"]
    assert report.conserved
    assert not store.exists("chronic1/siteA/S001/sess-01/ir/converted/000001")


def test_failing_extractor_marks_slot_failed(tmp_path):
    def broken(frame, ctx):
        raise RuntimeError("nope")

    reg = ExtractorRegistry([ExtractorSpec("broken", "image", 20, 1, broken)])
    store, p, _ = _ingest(tmp_path, IR_ONLY, 0.25, registry=reg)
    report = p.run_until_drained()
    assert report.completed == 2 and report.failed_features == 2
    slot = load_record(store, store.raw_keys()[0]).features["broken"]
    assert slot["status"] == "failed" and "nope" in slot["reason"]


def test_extractor_cost_ratio_is_validated():
    with pytest.raises(ValueError):
        ExtractorSpec("x", "image", 100, 1, lambda f, c: 0)
    with pytest.raises(ValueError):
        ExtractorSpec("x", "image", 50, 10, lambda f, c: 0)


def test_registry_from_config(tmp_path):
    cfg = {"schema_version": 2, "extractors": [{"name": "bright", "impl": "mean_brightness", "cpu_ms": 30, "accelerated_ms": 1}]}
    (tmp_path / "x.json").write_text(json.dumps(cfg))
    reg = ExtractorRegistry.from_file(tmp_path / "x.json")
    assert reg.schema_version == 2 and "bright" in reg and reg["bright"].cpu_ms == 30
    with pytest.raises(ValueError):
        ExtractorRegistry.from_config({"extractors": [{"name": "x", "impl": "pose"}]})


def test_feature_record_round_trip():
    rec = FeatureRecord("a/b", 1, "loc", "png", 5, "c", {"x": {"status": EMPTY, "value": None, "cost_ms": 0.0}})
    assert FeatureRecord.from_bytes(rec.to_bytes()) == rec
    assert record_path("chronic1/siteA/S001/sess-01/ir/raw/000003").endswith("/ir/features/000003")


# whole runs ------------------------------------------------------------------------


def test_crashes_are_absorbed_exactly_once(tmp_path):
    faults = PipelineFaults(crash_fraction=0.3, stages=("convert", "metadata", "extract"), seed=3)
    store, p, m = _ingest(tmp_path / "a", IR_ONLY, 20, vitals=True, faults=faults)
    report = p.run_until_drained()
    n = len(m.checksums) + 40
    assert report.items_in == n and report.completed == n
    assert report.dead_lettered == 0 and report.duplicate_commits == 0
    assert report.redeliveries > 0 and report.crashes > 0 and report.retries_absorbed > 0
    assert report.conserved
    clean_store, clean, _ = _ingest(tmp_path / "b", IR_ONLY, 20, vitals=True)
    clean.run_until_drained()
    assert _records(store) == _records(clean_store)


@settings(max_examples=8, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.integers(1, 4), st.integers(0, 99))
def test_conservation_under_random_fault_plans(tmp_path_factory, fraction, post, crashes, seed):
    faults = PipelineFaults(
        crash_fraction=fraction,
        max_crashes_per_item=crashes,
        stages=("convert", "metadata", "extract"),
        post_commit_fraction=post,
        seed=seed,
    )
    store, p, m = _ingest(tmp_path_factory.mktemp("p"), IR_ONLY, 2, faults=faults)
    store.put("chronic1/siteA/S001/sess-01/audio/raw/000000", b"RIFF-broken")
    report = p.run_until_drained()
    assert report.conserved
    assert report.duplicate_commits == 0
    assert report.dead_lettered >= 1  # the broken payload
    if crashes >= 5:
        assert report.completed == 0
    else:
        assert report.completed == len(m.checksums)


def test_deterministic_runs(tmp_path):
    faults = PipelineFaults(crash_fraction=0.5, seed=9)
    a, pa, _ = _ingest(tmp_path / "a", WIDE_AUDIO, 2, faults=faults)
    b, pb, _ = _ingest(tmp_path / "b", WIDE_AUDIO, 2, faults=faults)
    ra, rb = pa.run_until_drained(), pb.run_until_drained()
    assert _records(a) == _records(b)
    assert ra.to_json() == rb.to_json()


def test_autoscaling_during_run_and_cost_report(tmp_path):
    store, p, m = _ingest(tmp_path, IR_ONLY, 30, pool=WorkerPool(max_workers=4, target_backlog_per_worker=20))
    report = p.run_until_drained()
    assert report.peak_workers == 4
    assert report.scaling_log[0][2] == 4 and report.scaling_log[-1][2] <= 1
    assert all(0 <= w <= 4 for _, _, w in report.scaling_log)
    assert report.worker_busy_s == pytest.approx(len(m.checksums) * 0.48)
    assert report.simulated_cost == pytest.approx((report.worker_busy_s + report.worker_idle_s) / 3600 * 0.20)


def test_accelerated_pool_is_faster(tmp_path):
    cpu_store, cpu, _ = _ingest(tmp_path / "c", WIDE_AUDIO, 3)
    gpu_store, gpu, _ = _ingest(tmp_path / "g", WIDE_AUDIO, 3, pool=WorkerPool(accelerated=True))
    rc, rg = cpu.run_until_drained(), gpu.run_until_drained()
    assert 10 <= rc.worker_busy_s / rg.worker_busy_s <= 60
    # feature values do not depend on the hardware
    strip = lambda recs: {k: {n: s["value"] for n, s in json.loads(v)["features"].items()} for k, v in recs.items()}
    assert strip(_records(cpu_store)) == strip(_records(gpu_store))
