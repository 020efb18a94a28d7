"""Command-line entry point.

Exit codes: 0 success, 1 data loss, 2 invalid input (config, query, flags),
3 any other fault (including dead-lettered pipeline messages).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .client import StreamSpec, bench_stream
from .core import KeyParseError, ValidationError
from .rdb import Database, DatasetError, QueryError, SchemaError, parse
from .study import (
    IngestFaults,
    StudyConfig,
    build_datasets,
    dataset_digests,
    ingest_study,
    publish_all,
    simulate_study,
    study_report,
)

EXIT_OK, EXIT_LOSS, EXIT_INVALID, EXIT_FAULT = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


def _emit(args, payload: dict) -> None:
    if getattr(args, "json_out", None):
        path = Path(args.json_out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=1, sort_keys=True, default=str) + "\n")


def _table(header: list[str], rows: list) -> str:
    cells = [[str(h) for h in header]] + [["" if v is None else str(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


# commands --------------------------------------------------------------------


def cmd_simulate(args) -> int:
    config = StudyConfig.from_file(args.config)
    if args.seed is not None:
        config.seed = args.seed
    result = simulate_study(config, args.out, time_scale=args.time_scale)
    print(f"simulated {len(result.manifests)} recordings on {len(result.disks)} sealed disks in {args.out}")
    for m in result.manifests:
        print(f"  {m.subject_id} {m.session_id} {m.device_id}: {m.total_items} items, {m.total_bytes} bytes")
    _emit(args, {"disks": result.disks, "manifests": [m.to_dict() | {"checksums": len(m.checksums)} for m in result.manifests]})
    return EXIT_OK


def cmd_ingest(args) -> int:
    faults = IngestFaults()
    if args.faults:
        faults = IngestFaults.from_dict(json.loads(Path(args.faults).read_text()))
    result = ingest_study(args.input, args.store, mode=args.mode, faults=faults, dual_courier=args.dual_courier)
    rep = result.pipeline
    print(f"transfer: {sum(t.transferred for t in result.transfers)} items sent, {result.interruptions} interruption(s) resumed")
    print(
        f"pipeline: {rep.items_in} in, {rep.completed} completed, {rep.dead_lettered} dead-lettered, "
        f"{rep.redeliveries} redeliveries, {rep.duplicate_commits} duplicate commits"
    )
    print(f"workers: {rep.worker_busy_s:.1f} s busy, {rep.worker_idle_s:.1f} s idle, cost {rep.simulated_cost:.4f}")
    print(f"verified {result.verified} items, archived {result.archived}; data loss: {result.data_loss}")
    for t in result.transfers:
        if t.loss:
            print(f"DATA LOSS: courier {t.loss.courier_id} lost with {len(t.loss.keys)} keys")
    _emit(args, result.to_dict())
    if result.data_loss:
        return EXIT_LOSS
    if rep.dead_lettered or not rep.conserved:
        return EXIT_FAULT
    return EXIT_OK


def cmd_rdb_build(args) -> int:
    staged = build_datasets(args.store, args.db, group_rows=args.group_rows)
    print(_table(["dataset", "rows staged"], sorted(staged.items())))
    if args.publish:
        published = publish_all(args.store, args.db)
        print(_table(["dataset", "snapshot"], sorted(published.items())))
    _emit(args, {"staged": staged, "digests": dataset_digests(args.db) if args.publish else {}})
    return EXIT_OK


def cmd_rdb_publish(args) -> int:
    db = Database(args.db)
    names = [args.dataset] if args.dataset else db.names()
    if args.store:
        published = publish_all(args.store, args.db, names)
    else:
        published = {n: db.open(n).publish().snapshot_id for n in names}
    rows = [(n, sid, db.open(n).snapshot(sid).total_rows) for n, sid in sorted(published.items())]
    print(_table(["dataset", "snapshot", "rows"], rows))
    _emit(args, {"snapshots": published, "digests": dataset_digests(args.db)})
    return EXIT_OK


def cmd_rdb_query(args) -> int:
    ds = Database(args.db).open(args.dataset)
    if args.count_by:
        filters = {}
        for f in args.filter or []:
            name, sep, expr = f.partition("=")
            if not sep or not name:
                raise CliError(f"--filter expects NAME=EXPRESSION, got {f!r}")
            filters[name.strip()] = parse(expr)
        if not filters:
            filters = {"rows": None}
        table = ds.count_by(args.count_by, filters, snapshot=args.snapshot)
        print(_table([args.count_by, *filters], table))
        _emit(args, {"count_by": args.count_by, "columns": list(filters), "rows": [list(r) for r in table]})
        return EXIT_OK
    columns = args.columns.split(",") if args.columns else [c.name for c in ds.schema if not c.binary]
    result = ds.scan(args.snapshot, columns, parse(args.where or ""))
    shown = result.rows[: args.limit] if args.limit else result.rows
    print(_table(columns, [[r[c] for c in columns] for r in shown]))
    s = result.stats
    print(f"{len(result.rows)} rows; row groups read {s.groups_read}, skipped {s.groups_skipped} of {s.groups_total}")
    _emit(args, {"rows": len(result.rows), "stats": vars(s)})
    return EXIT_OK


def cmd_stream_bench(args) -> int:
    spec = StreamSpec.from_file(args.spec)
    if args.prefetch_workers:
        spec.prefetch_workers = args.prefetch_workers
    report = bench_stream(Database(args.db), spec, passes=args.passes)
    rows = [
        (i + 1, p.units, p.rows, f"{p.rows_per_s:.0f}", f"{p.bytes_per_s / 1e6:.2f}", p.cache_hit, p.transform_invocations)
        for i, p in enumerate(report.passes)
    ]
    print(_table(["pass", "units", "rows", "rows/s", "MB/s", "cache hit", "transforms"], rows))
    _emit(args, report.to_dict())
    return EXIT_OK


def cmd_report(args) -> int:
    report = study_report(args.store)
    print(report.table())
    print(f"\nsessions {report.sessions}, audio items {report.audio_items}, vitals samples {report.vitals_samples}")
    print("images by channel: " + ", ".join(f"{k} {v}" for k, v in report.images_by_channel.items()))
    _emit(args, report.to_dict())
    if not report.consistent:
        print("manifest image count disagrees with the store", file=sys.stderr)
        return EXIT_LOSS
    return EXIT_OK


# parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json-out", help="also write the result as JSON to this file")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="avstudy", description="Simulate, ingest, index and stream a bedside A/V study.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="record sessions onto sealed disks")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, help="override the config seed")
    s.add_argument("--time-scale", type=float, default=0.0, help="wall seconds per virtual second (0: as fast as possible)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("ingest", parents=[common], help="transfer disks and run the curation pipeline")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--store", required=True)
    s.add_argument("--mode", choices=["network", "courier"], default="network")
    s.add_argument("--faults", help="JSON fault plan")
    s.add_argument("--dual-courier", action="store_true", help="ship a twin courier carrying the same disks")
    s.set_defaults(func=cmd_ingest)

    r = sub.add_parser("rdb", help="research database")
    rsub = r.add_subparsers(dest="rdb_command", required=True)
    s = rsub.add_parser("build", parents=[common], help="stage rows for ingested items")
    s.add_argument("--store", required=True)
    s.add_argument("--db", required=True)
    s.add_argument("--group-rows", type=int, help="rows per row group (default: the study config, else 1000)")
    s.add_argument("--publish", action="store_true", help="publish right after staging")
    s.set_defaults(func=cmd_rdb_build)
    s = rsub.add_parser("publish", parents=[common], help="make staged rows visible")
    s.add_argument("--db", required=True)
    s.add_argument("--store", help="stamp snapshots with the study's virtual time")
    s.add_argument("--dataset")
    s.set_defaults(func=cmd_rdb_publish)
    s = rsub.add_parser("query", parents=[common], help="filter rows or count by group")
    s.add_argument("--db", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--snapshot", type=int)
    s.add_argument("--where", help="filter expression, e.g. \"subject_id = 'S001' and channel = 'wide'\"")
    s.add_argument("--columns", help="comma-separated column list")
    s.add_argument("--limit", type=int, default=20, help="rows to print (0: all)")
    s.add_argument("--count-by", help="group column for counting")
    s.add_argument("--filter", action="append", help="NAME=EXPRESSION, one count column per filter")
    s.set_defaults(func=cmd_rdb_query)

    st = sub.add_parser("stream", help="streaming reader")
    ssub = st.add_subparsers(dest="stream_command", required=True)
    s = ssub.add_parser("bench", parents=[common], help="measure stream throughput")
    s.add_argument("--db", required=True)
    s.add_argument("--spec", required=True)
    s.add_argument("--passes", type=int, default=2)
    s.add_argument("--prefetch-workers", type=int)
    s.set_defaults(func=cmd_stream_bench)

    s = sub.add_parser("report", parents=[common], help="study summary table")
    s.add_argument("--store", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ValidationError as exc:
        print(f"error: invalid {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (QueryError, SchemaError, KeyParseError, DatasetError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any other fault maps to its own exit code
        logging.getLogger("avstudy").exception("unhandled fault")
        print(f"fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
