"""Shared dataset generator, predicate generator and brute-force oracle for
the research database tests."""

import operator
import random

from avstudy.rdb import And, Compare, Not, Or, Schema

SCHEMA = Schema(
    [
        ("subject_id", "string"),
        ("channel", "string"),
        ("seq", "int64"),
        ("score", "float64"),
        ("ts", "timestamp"),
        ("flag", "bool"),
        ("region", "box4"),
        ("payload", "bytes"),
    ]
)

CHANNELS = ["wide", "narrow", "depth", "ir", "audio"]


def make_rows(n: int, subjects: int = 50, seed: int = 0) -> list[dict]:
    """Rows sorted by subject, as the ingest path lays them out."""
    rng = random.Random(seed)
    per = n // subjects
    rows = []
    for s in range(subjects):
        count = per if s < subjects - 1 else n - per * (subjects - 1)
        for i in range(count):
            rows.append(
                {
                    "subject_id": f"S{s:03d}",
                    "channel": rng.choice(CHANNELS),
                    "seq": i,
                    "score": None if rng.random() < 0.1 else round(rng.uniform(-50, 50), 3),
                    "ts": 1_546_300_800_000 + s * 86_400_000 + i * 40,
                    "flag": None if rng.random() < 0.05 else rng.random() < 0.5,
                    "region": (rng.randrange(64), rng.randrange(36), 8, 8),
                    "payload": bytes([i % 256]) * 4,
                }
            )
    return rows


_OPS = {"=": operator.eq, "!=": operator.ne, "<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge}


def oracle(pred, row) -> bool:
    """Reference semantics: a comparison with a null is false; not is complement."""
    if pred is None:
        return True
    if isinstance(pred, And):
        return oracle(pred.left, row) and oracle(pred.right, row)
    if isinstance(pred, Or):
        return oracle(pred.left, row) or oracle(pred.right, row)
    if isinstance(pred, Not):
        return not oracle(pred.operand, row)
    v = row[pred.column]
    if v is None:
        return False
    return _OPS[pred.op](v, pred.value)


def compile_oracle(pred):
    """Same semantics as :func:`oracle`, built once into closures for speed."""
    if pred is None:
        return lambda row: True
    if isinstance(pred, And):
        a, b = compile_oracle(pred.left), compile_oracle(pred.right)
        return lambda row: a(row) and b(row)
    if isinstance(pred, Or):
        a, b = compile_oracle(pred.left), compile_oracle(pred.right)
        return lambda row: a(row) or b(row)
    if isinstance(pred, Not):
        a = compile_oracle(pred.operand)
        return lambda row: not a(row)
    column, fn, value = pred.column, _OPS[pred.op], pred.value

    def leaf(row):
        v = row[column]
        return v is not None and fn(v, value)

    return leaf


def random_leaf(rng: random.Random, subjects: int = 50):
    column = rng.choice(["subject_id", "channel", "seq", "score", "ts", "flag"])
    op = rng.choice(list(_OPS))
    if column == "subject_id":
        value = f"S{rng.randrange(subjects + 5):03d}"
    elif column == "channel":
        value = rng.choice(CHANNELS + ["thermal"])
    elif column == "seq":
        value = rng.randrange(-5, 1100)
    elif column == "score":
        value = rng.choice([round(rng.uniform(-60, 60), 3), 0.0, 50])
    elif column == "ts":
        value = 1_546_300_800_000 + rng.randrange(subjects + 2) * 86_400_000 + rng.randrange(0, 50_000)
    else:
        value = rng.random() < 0.5
    return Compare(column, op, value)


def random_predicate(rng: random.Random, depth: int = 3, subjects: int = 50):
    if depth == 0 or rng.random() < 0.35:
        return random_leaf(rng, subjects)
    kind = rng.choice(["and", "or", "not"])
    if kind == "not":
        return Not(random_predicate(rng, depth - 1, subjects))
    cls = And if kind == "and" else Or
    return cls(random_predicate(rng, depth - 1, subjects), random_predicate(rng, depth - 1, subjects))


def canonical(rows, columns):
    """Multiset of rows as tuples. The first two columns must identify a row,
    so sorting never compares the nullable ones."""
    return sorted(tuple(r[c] for c in columns) for r in rows)
