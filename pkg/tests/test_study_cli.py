import json
import shutil

import pytest

from avstudy.cli import EXIT_INVALID, EXIT_LOSS, EXIT_OK, main
from avstudy.core import SessionManifest
from avstudy.rdb import Database
from avstudy.study import StudyConfig, study_report

SMALL = {"subjects": 3, "duration_s": 4, "seed": 11}


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def _run(*argv):
    return main([str(a) for a in argv])


def _manifests(sim_dir):
    return [SessionManifest.from_json(p.read_text()) for p in sorted((sim_dir / "manifests").rglob("*.json"))]


@pytest.fixture(scope="module")
def study(tmp_path_factory):
    root = tmp_path_factory.mktemp("study")
    cfg = _write(root / "cfg.json", SMALL)
    assert _run("simulate", "--config", cfg, "--out", root / "sim") == EXIT_OK
    assert _run("ingest", "--in", root / "sim", "--store", root / "store", "--json-out", root / "ingest.json") == EXIT_OK
    assert _run("rdb", "build", "--store", root / "store", "--db", root / "db", "--publish") == EXIT_OK
    return root


# config ------------------------------------------------------------------------


@pytest.mark.parametrize(
    "bad, field",
    [
        ({"subjects": 2, "colour": "red"}, "colour"),
        ({"subjects": 0}, "subjects"),
        ({"subjects": 2, "seed": "x"}, "seed"),
        ({"subjects": 2, "duration_s": -1}, "duration_s"),
        ({"subjects": 2, "channels": {"thermal": None}}, "channels"),
        ({"subjects": 2, "pipeline": {"workers": 3}}, "pipeline"),
        ({"subjects": 2, "scenario": [[1.0, "reset"]]}, "scenario"),
    ],
)
def test_bad_config_names_the_field(tmp_path, capsys, bad, field):
    code = _run("simulate", "--config", _write(tmp_path / "c.json", bad), "--out", tmp_path / "out")
    assert code == EXIT_INVALID
    assert field in capsys.readouterr().err
    assert not (tmp_path / "out" / "disks").exists()


def test_config_must_be_json(tmp_path):
    (tmp_path / "c.json").write_text("{nope")
    assert _run("simulate", "--config", tmp_path / "c.json", "--out", tmp_path / "o") == EXIT_INVALID


def test_roster_config():
    cfg = StudyConfig.from_dict(
        {"subjects": [{"subject_id": "P1", "age": 70, "gender": "female", "weight": 60, "height": 160}], "sessions_per_subject": 2}
    )
    assert [s[2] for s in cfg.sessions()] == ["sess-01", "sess-02"]


def test_same_seed_same_manifests(tmp_path):
    cfg = _write(tmp_path / "c.json", {"subjects": 1, "duration_s": 2, "seed": 5})
    for out in ("a", "b"):
        assert _run("simulate", "--config", cfg, "--out", tmp_path / out) == EXIT_OK
    a = [m.to_json() for m in _manifests(tmp_path / "a")]
    b = [m.to_json() for m in _manifests(tmp_path / "b")]
    assert a == b and len(a) == 2  # media and vitals recording


# ingest --------------------------------------------------------------------------


def test_clean_ingest_reports_no_loss(study):
    out = json.loads((study / "ingest.json").read_text())
    total = sum(len(m.checksums) for m in _manifests(study / "sim"))
    assert out["data_loss"] == 0
    assert out["pipeline"]["completed"] == out["pipeline"]["items_in"] == total
    assert out["verified"] == total == out["archived"]


def test_ingest_without_manifests_is_invalid(tmp_path):
    assert _run("ingest", "--in", tmp_path, "--store", tmp_path / "s") == EXIT_INVALID


@pytest.fixture(scope="module")
def tiny_sim(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg = _write(root / "c.json", {"subjects": 1, "duration_s": 2, "seed": 3, "channels": {"wide": None, "narrow": None, "depth": None}})
    assert _run("simulate", "--config", cfg, "--out", root / "sim") == EXIT_OK
    return root / "sim"


def test_single_courier_loss_exits_nonzero(tiny_sim, tmp_path, capsys):
    plan = _write(tmp_path / "plan.json", {"courier_lost": True})
    code = _run("ingest", "--in", tiny_sim, "--store", tmp_path / "s", "--mode", "courier", "--faults", plan, "--json-out", tmp_path / "o.json")
    assert code == EXIT_LOSS
    assert "DATA LOSS" in capsys.readouterr().out
    out = json.loads((tmp_path / "o.json").read_text())
    assert sorted(out["lost_keys"]) == sorted(k for m in _manifests(tiny_sim) for k in m.checksums)


def test_dual_courier_survives_loss(tiny_sim, tmp_path):
    plan = _write(tmp_path / "plan.json", {"courier_lost": True})
    code = _run("ingest", "--in", tiny_sim, "--store", tmp_path / "s", "--mode", "courier", "--dual-courier", "--faults", plan)
    assert code == EXIT_OK


def test_crash_plan_is_absorbed(tiny_sim, tmp_path):
    plan = _write(tmp_path / "plan.json", {"crash_fraction": 0.5, "interrupt_after": 5, "seed": 2})
    code = _run("ingest", "--in", tiny_sim, "--store", tmp_path / "s", "--faults", plan, "--json-out", tmp_path / "o.json")
    assert code == EXIT_OK
    out = json.loads((tmp_path / "o.json").read_text())
    assert out["pipeline"]["redeliveries"] > 0 and out["interruptions"] == 1
    assert out["pipeline"]["duplicate_commits"] == 0


def test_corrupted_transfer_counts_as_loss(tiny_sim, tmp_path):
    victim = sorted(k for m in _manifests(tiny_sim) for k in m.checksums)[3]
    plan = _write(tmp_path / "plan.json", {"corrupt": [victim]})
    assert _run("ingest", "--in", tiny_sim, "--store", tmp_path / "s", "--faults", plan) == EXIT_LOSS


def test_unknown_fault_field(tiny_sim, tmp_path):
    plan = _write(tmp_path / "plan.json", {"meteor": True})
    assert _run("ingest", "--in", tiny_sim, "--store", tmp_path / "s", "--faults", plan) == EXIT_INVALID


# rdb -------------------------------------------------------------------------------


def test_build_creates_the_datasets(study):
    assert {"frames", "audio", "vitals", "subjects"} <= set(Database(study / "db").names())


def test_count_by_matches_manifests(study, capsys):
    code = _run(
        "rdb", "query", "--db", study / "db", "--dataset", "items", "--count-by", "subject_id",
        "--filter", "vitals=channel = 'vitals'", "--filter", "wide=channel = 'wide'",
        "--json-out", study / "q.json",
    )
    assert code == EXIT_OK
    got = {r[0]: (r[1], r[2]) for r in json.loads((study / "q.json").read_text())["rows"]}
    want: dict = {}
    for m in _manifests(study / "sim"):
        v = m.channels.get("vitals")
        w = m.channels.get("wide")
        a, b = want.get(m.subject_id, (0, 0))
        want[m.subject_id] = (a + (v.item_count if v else 0), b + (w.item_count if w else 0))
    assert got == want


def test_query_rows_match_oracle(study, capsys):
    code = _run(
        "rdb", "query", "--db", study / "db", "--dataset", "frames",
        "--where", "subject_id = 'S002' and channel = 'ir'", "--json-out", study / "f.json",
    )
    assert code == EXIT_OK
    want = sum(m.channels["ir"].item_count for m in _manifests(study / "sim") if m.subject_id == "S002" and "ir" in m.channels)
    assert json.loads((study / "f.json").read_text())["rows"] == want


@pytest.mark.parametrize(
    "extra",
    [
        ["--where", "nope = 1"],
        ["--where", "channel = "],
        ["--count-by", "nope"],
        ["--count-by", "subject_id", "--filter", "no-equals-sign"],
        ["--snapshot", "42"],
    ],
)
def test_bad_queries_exit_invalid(study, extra):
    assert _run("rdb", "query", "--db", study / "db", "--dataset", "frames", *extra) == EXIT_INVALID


def test_old_snapshot_keeps_old_counts(study, tmp_path):
    db_dir = tmp_path / "db"
    shutil.copytree(study / "db", db_dir)
    ds = Database(db_dir).open("subjects")
    before = ds.snapshot().snapshot_id
    old_rows = ds.snapshot().total_rows
    ds.append_rows([{"subject_id": "S999", "age_range": "70-79", "gender": "female", "weight_range": "60-69",
                     "height_range": "160-169", "conditions": "", "sessions": 0}])
    assert _run("rdb", "publish", "--db", db_dir, "--dataset", "subjects") == EXIT_OK
    _run("rdb", "query", "--db", db_dir, "--dataset", "subjects", "--snapshot", before, "--json-out", tmp_path / "old.json")
    _run("rdb", "query", "--db", db_dir, "--dataset", "subjects", "--json-out", tmp_path / "new.json")
    assert json.loads((tmp_path / "old.json").read_text())["rows"] == old_rows
    assert json.loads((tmp_path / "new.json").read_text())["rows"] == old_rows + 1


def test_rebuild_is_idempotent(study, tmp_path):
    db_dir = tmp_path / "db"
    shutil.copytree(study / "db", db_dir)
    assert _run("rdb", "build", "--store", study / "store", "--db", db_dir, "--json-out", tmp_path / "b.json") == EXIT_OK
    assert set(json.loads((tmp_path / "b.json").read_text())["staged"].values()) == {0}


# stream and report -------------------------------------------------------------------


def test_stream_bench(study, tmp_path):
    spec = _write(
        tmp_path / "spec.json",
        {"dataset": "frames", "predicate": "channel = 'ir'", "transforms": ["normalize"],
         "cache": {"directory": str(tmp_path / "cache")}, "shuffle": {"seed": 1, "buffer_rows": 16}},
    )
    assert _run("stream", "bench", "--db", study / "db", "--spec", spec, "--prefetch-workers", 2, "--json-out", tmp_path / "r.json") == EXIT_OK
    passes = json.loads((tmp_path / "r.json").read_text())["passes"]
    assert [p["cache_hit"] for p in passes] == [False, True]
    assert passes[1]["transform_invocations"] == 0 and passes[0]["rows"] == passes[1]["rows"] > 0


def test_stream_bench_bad_spec(study, tmp_path):
    spec = _write(tmp_path / "spec.json", {"dataset": "frames", "transforms": ["sharpen"]})
    assert _run("stream", "bench", "--db", study / "db", "--spec", spec) == EXIT_INVALID


def test_report_recounts(study, capsys):
    assert _run("report", "--store", study / "store", "--json-out", study / "r.json") == EXIT_OK
    printed = capsys.readouterr().out
    assert "Total images" in printed and "11,132,486" in printed
    rep = json.loads((study / "r.json").read_text())
    per_subject = 4 * (25 * 3 + 8)
    assert rep["total_images"] == 3 * per_subject == rep["images_in_store"]
    assert rep["recruited_subjects"] == rep["completed_subjects"] == 3
    assert rep["sessions"] == 3 and rep["study_days"] == 3
    assert rep["audio_items"] == 3 * 4 and rep["vitals_samples"] == 3 * 8
    store = study / "store" / "objects"
    raw = [p for p in store.rglob("*") if p.is_file() and "/raw/" in p.as_posix() and "quarantine" not in p.as_posix()]
    assert rep["storage_bytes"] == sum(p.stat().st_size for p in raw)


def test_empty_store_report(tmp_path):
    rep = study_report(tmp_path / "nothing")
    assert (rep.recruited_subjects, rep.completed_subjects, rep.total_images, rep.study_days, rep.storage_bytes) == (0, 0, 0, 0, 0)
    assert rep.consistent


def test_missing_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as err:
        main([])
    assert err.value.code == 2


def test_config_group_rows_reaches_the_build(tmp_path):
    cfg = _write(tmp_path / "c.json", {"subjects": 1, "duration_s": 2, "seed": 1, "channels": {"wide": None, "narrow": None, "depth": None}, "rdb": {"group_rows": 5}})
    assert _run("simulate", "--config", cfg, "--out", tmp_path / "sim") == EXIT_OK
    assert _run("ingest", "--in", tmp_path / "sim", "--store", tmp_path / "s") == EXIT_OK
    assert _run("rdb", "build", "--store", tmp_path / "s", "--db", tmp_path / "db", "--publish") == EXIT_OK
    snap = Database(tmp_path / "db").open("frames").snapshot()
    assert snap.total_rows == 16 and max(g.rows for g in snap.groups) == 5
