import hashlib
import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from avstudy.core import (
    Channel,
    DataItem,
    HealthRecord,
    KeyParseError,
    MediaFormat,
    ObjectKey,
    SessionManifest,
    ValidationError,
    VitalsRecord,
    Zone,
    digest,
    is_pii_name,
    merge_gaps,
    obfuscate,
    parse_key,
)

component = st.from_regex(r"[A-Za-z0-9][A-Za-z0-9._-]{0,11}", fullmatch=True)
keys = st.builds(
    ObjectKey,
    component,
    component,
    component,
    component,
    st.sampled_from(list(Channel)),
    st.sampled_from(list(Zone)),
    st.integers(0, 999_999),
)


def test_digest_of_empty_input_is_sha256_empty():
    assert digest(b"") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


@given(st.binary(min_size=1, max_size=256), st.data())
def test_digest_detects_single_bit_flip(payload, data):
    bit = data.draw(st.integers(0, len(payload) * 8 - 1))
    flipped = bytearray(payload)
    flipped[bit // 8] ^= 1 << (bit % 8)
    assert digest(payload) == digest(bytes(payload))
    assert digest(payload) != digest(bytes(flipped))
    assert digest(payload) == hashlib.sha256(payload).hexdigest()


def test_parse_key_example():
    k = parse_key("chronic1/siteA/S005/sess-01/wide/raw/000042")
    assert k == ObjectKey("chronic1", "siteA", "S005", "sess-01", Channel.WIDE, Zone.RAW, 42)


def test_parse_key_reports_arity():
    with pytest.raises(KeyParseError) as err:
        parse_key("chronic1/siteA/S005/sess-01/wide/raw")
    assert err.value.component == "arity"
    assert "6" in str(err.value)


@pytest.mark.parametrize(
    "path, component",
    [
        ("chronic1/siteA/S005/sess-01/thermal/raw/000001", "channel"),
        ("chronic1/siteA/S005/sess-01/wide/hot/000001", "zone"),
        ("chronic1/siteA/S005/sess-01/wide/raw/abc", "sequence"),
        ("chronic1/siteA/S005/sess-01/wide/raw/42", "sequence"),
        ("chronic1//S005/sess-01/wide/raw/000001", "site_id"),
    ],
)
def test_parse_key_names_offending_component(path, component):
    with pytest.raises(KeyParseError) as err:
        parse_key(path)
    assert err.value.component == component


@given(keys)
def test_key_round_trip(key):
    assert parse_key(key.serialize()) == key
    assert parse_key(key.serialize()).serialize() == key.serialize()


def test_key_rejects_negative_sequence():
    with pytest.raises(ValidationError):
        ObjectKey("s", "x", "S1", "e", "wide", "raw", -1)


def test_data_item_checksum_and_payload():
    key = parse_key("chronic1/siteA/S005/sess-01/wide/raw/000001")
    item = DataItem(key, 5, MediaFormat.TIFF, b"abc")
    assert item.checksum == digest(b"abc")
    with pytest.raises(ValidationError):
        DataItem(key, 5, MediaFormat.TIFF, b"")
    with pytest.raises(ValidationError):
        DataItem(key, 5, MediaFormat.TIFF, b"abc", checksum=digest(b"abd"))


@pytest.mark.parametrize(
    "args, expected",
    [
        ((47, 83.2, 171), ("40-49", "80-89 kg", "170-179 cm")),
        ((40, 80.0, 170), ("40-49", "80-89 kg", "170-179 cm")),
        ((9, 5, 60), ("0-9", "0-9 kg", "60-69 cm")),
    ],
)
def test_obfuscate_examples(args, expected):
    assert obfuscate(*args) == expected


def test_obfuscate_age_exhaustive():
    for age in range(1, 121):
        lo = age - age % 10
        assert obfuscate(age, 70, 170)[0] == f"{lo}-{lo + 9}"


@given(st.floats(0.01, 120), st.floats(0.01, 400), st.floats(0.01, 250))
def test_obfuscate_is_constant_within_a_bucket(age, weight, height):
    out = obfuscate(age, weight, height)
    a_lo, w_lo, h_lo = (math.floor(v / 10) * 10 for v in (age, weight, height))
    # every other value in the same buckets maps to the same ranges
    probe = obfuscate(max(a_lo, 0.5), max(w_lo, 0.5), max(h_lo, 0.5))
    assert out == probe
    assert out[0] == f"{a_lo}-{a_lo + 9}"


@pytest.mark.parametrize(
    "args, name",
    [((121, 70, 170), "exact_age"), ((40, 401, 170), "exact_weight"), ((40, 70, 251), "exact_height"), ((0, 70, 170), "exact_age")],
)
def test_obfuscate_rejects_implausible_values(args, name):
    with pytest.raises(ValidationError) as err:
        obfuscate(*args)
    assert err.value.field == name
    assert name in str(err.value)


def test_health_record_holds_only_buckets():
    rec = HealthRecord.from_exact("S001", 47, "female", 83.2, 171, ["copd"])
    assert rec.to_dict() == {
        "subject_id": "S001",
        "age_range": "40-49",
        "gender": "female",
        "weight_range": "80-89 kg",
        "height_range": "170-179 cm",
        "conditions": ["copd"],
    }
    with pytest.raises(ValidationError):
        HealthRecord("S001", "47-47", "female", "80-89 kg", "170-179 cm")


def test_vitals_record_rules_and_csv():
    rec = VitalsRecord(1000, 72.5, 14.0, 97.0, 120.0, 80.0)
    assert VitalsRecord.from_csv(rec.to_csv()) == rec
    sparse = VitalsRecord(1000, 72.5, 14.0)
    assert VitalsRecord.from_csv(sparse.to_csv()) == sparse
    with pytest.raises(ValidationError):
        VitalsRecord(0, 70, 14, bp_systolic=80, bp_diastolic=80)
    with pytest.raises(ValidationError):
        VitalsRecord(0, 0, 14)
    with pytest.raises(ValidationError):
        VitalsRecord(0, 70, 14, spo2=101)


def test_pii_names():
    assert is_pii_name("patient_name") and is_pii_name("PII_blob") and is_pii_name("identity_ref")
    assert not is_pii_name("subject_id") and not is_pii_name("age_range")


def _manifest():
    m = SessionManifest("sess-01", "S001", "D1", "W1", "chronic1", "siteA", 0, 10_000)
    for seq in range(3):
        k = ObjectKey("chronic1", "siteA", "S001", "sess-01", "ir", "raw", seq)
        m.record(k, digest(bytes([seq])), 1, timestamp=seq * 125)
    return m


def test_manifest_json_round_trip_and_format():
    m = _manifest()
    m.privacy_gaps = [(1000, 2000)]
    text = m.to_json()
    data = json.loads(text)
    assert set(data) >= {"session_id", "subject_id", "device_id", "ward_id", "start", "end", "channels", "privacy_gaps", "checksums"}
    assert all(v == v.lower() and len(v) == 64 for v in data["checksums"].values())
    assert SessionManifest.from_json(text).to_json() == text
    m.validate()


def test_manifest_rejects_non_increasing_sequence():
    m = _manifest()
    k = ObjectKey("chronic1", "siteA", "S001", "sess-01", "ir", "raw", 1)
    with pytest.raises(ValidationError):
        m.record(k, digest(b"x"), 1)


def test_manifest_gap_validation():
    m = _manifest()
    m.privacy_gaps = [(2000, 3000), (2500, 4000)]
    with pytest.raises(ValidationError):
        m.validate()
    m.privacy_gaps = [(9000, 11_000)]
    with pytest.raises(ValidationError):
        m.validate()


@given(st.lists(st.tuples(st.integers(0, 1000), st.integers(1, 50)), max_size=20))
def test_merge_gaps_produces_disjoint_sorted_cover(raw):
    gaps = [(s, s + w) for s, w in raw]
    merged = merge_gaps(gaps)
    for (s1, e1), (s2, e2) in zip(merged, merged[1:]):
        assert e1 < s2
    covered = {t for s, e in gaps for t in range(s, e)}
    assert covered == {t for s, e in merged for t in range(s, e)}
