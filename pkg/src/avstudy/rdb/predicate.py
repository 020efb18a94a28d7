"""Filter predicates: expression tree, parser, vectorized evaluation and
statistics-based pruning.

A comparison against a null value is false, and ``not`` is the plain
complement of its operand, so every row either satisfies a predicate or
does not.

Grammar of the textual form (``not`` binds tighter than ``and``, which binds
tighter than ``or``)::

    expr    := or_expr
    or_expr := and_expr ('or' and_expr)*
    and_expr:= unary ('and' unary)*
    unary   := 'not' unary | '(' expr ')' | term
    term    := column op literal
    op      := '=' | '==' | '!=' | '<>' | '<' | '<=' | '>' | '>='
    literal := integer | float | 'string' | "string" | true | false
"""

from __future__ import annotations

import operator
import re
from dataclasses import dataclass

import numpy as np

from .schema import ORDERED_TYPES, ColumnType, Schema, SchemaError

OPS = {"=": operator.eq, "!=": operator.ne, "<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge}
_OP_ALIASES = {"==": "=", "<>": "!=", "≠": "!=", "≤": "<=", "≥": ">="}


class QueryError(ValueError):
    pass


class Predicate:
    def __and__(self, other):
        return And(self, other)

    def __or__(self, other):
        return Or(self, other)

    def __invert__(self):
        return Not(self)

    def columns(self) -> set[str]:
        raise NotImplementedError


@dataclass(frozen=True)
class Compare(Predicate):
    column: str
    op: str
    value: object

    def __post_init__(self):
        op = _OP_ALIASES.get(self.op, self.op)
        if op not in OPS:
            raise QueryError(f"unknown operator {self.op!r}")
        object.__setattr__(self, "op", op)

    def columns(self):
        return {self.column}

    def __str__(self):
        return f"{self.column} {self.op} {_literal(self.value)}"


@dataclass(frozen=True)
class And(Predicate):
    left: Predicate
    right: Predicate

    def columns(self):
        return self.left.columns() | self.right.columns()

    def __str__(self):
        return f"({self.left} and {self.right})"


@dataclass(frozen=True)
class Or(Predicate):
    left: Predicate
    right: Predicate

    def columns(self):
        return self.left.columns() | self.right.columns()

    def __str__(self):
        return f"({self.left} or {self.right})"


@dataclass(frozen=True)
class Not(Predicate):
    operand: Predicate

    def columns(self):
        return self.operand.columns()

    def __str__(self):
        return f"(not {self.operand})"


def _literal(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return "'" + v.replace("\\", "\\\\").replace("'", "\\'") + "'"
    return repr(v)


# type checking -------------------------------------------------------------


def typecheck(pred: Predicate | None, schema: Schema) -> None:
    if pred is None:
        return
    if isinstance(pred, (And, Or)):
        typecheck(pred.left, schema)
        typecheck(pred.right, schema)
        return
    if isinstance(pred, Not):
        typecheck(pred.operand, schema)
        return
    if not isinstance(pred, Compare):
        raise QueryError(f"not a predicate: {pred!r}")
    try:
        col = schema[pred.column]
    except SchemaError as exc:
        raise QueryError(str(exc)) from None
    t, v = col.type, pred.value
    if t not in ORDERED_TYPES:
        raise QueryError(f"column {col.name} of type {t.value} cannot be filtered")
    ok = {
        ColumnType.INT64: isinstance(v, int) and not isinstance(v, bool),
        ColumnType.TIMESTAMP: isinstance(v, int) and not isinstance(v, bool),
        ColumnType.FLOAT64: isinstance(v, (int, float)) and not isinstance(v, bool) and v == v,
        ColumnType.STRING: isinstance(v, str),
        ColumnType.BOOL: isinstance(v, bool),
    }[t]
    if not ok:
        raise QueryError(f"literal {v!r} does not match column {col.name} of type {t.value}")


# evaluation ----------------------------------------------------------------


def evaluate(pred: Predicate | None, columns: dict, n: int) -> np.ndarray:
    """Boolean mask over ``n`` rows. ``columns`` maps name to ColumnData."""
    if pred is None:
        return np.ones(n, dtype=bool)
    if isinstance(pred, And):
        return evaluate(pred.left, columns, n) & evaluate(pred.right, columns, n)
    if isinstance(pred, Or):
        return evaluate(pred.left, columns, n) | evaluate(pred.right, columns, n)
    if isinstance(pred, Not):
        return ~evaluate(pred.operand, columns, n)
    data = columns[pred.column]
    result = np.asarray(OPS[pred.op](data.values, pred.value), dtype=bool)
    return result & ~data.nulls


def matches(pred: Predicate | None, row: dict) -> bool:
    """Evaluate against one row dict."""
    if pred is None:
        return True
    if isinstance(pred, And):
        return matches(pred.left, row) and matches(pred.right, row)
    if isinstance(pred, Or):
        return matches(pred.left, row) or matches(pred.right, row)
    if isinstance(pred, Not):
        return not matches(pred.operand, row)
    v = row[pred.column]
    return v is not None and bool(OPS[pred.op](v, pred.value))


# pruning -------------------------------------------------------------------


def bounds(pred: Predicate, stats: dict, num_rows: int) -> tuple[bool, bool]:
    """(may, must) for one row group: ``may`` is False only if no row can
    satisfy ``pred``; ``must`` is True only if every row does."""
    if isinstance(pred, And):
        a, b = bounds(pred.left, stats, num_rows), bounds(pred.right, stats, num_rows)
        return a[0] and b[0], a[1] and b[1]
    if isinstance(pred, Or):
        a, b = bounds(pred.left, stats, num_rows), bounds(pred.right, stats, num_rows)
        return a[0] or b[0], a[1] or b[1]
    if isinstance(pred, Not):
        may, must = bounds(pred.operand, stats, num_rows)
        return not must, not may
    s = stats[pred.column]
    lo, hi, nulls = s["min"], s["max"], s["null_count"]
    if num_rows == 0 or lo is None:
        return False, False
    v, op = pred.value, pred.op
    full = nulls == 0
    if op == "=":
        return lo <= v <= hi, full and lo == hi == v
    if op == "!=":
        return not (lo == hi == v), full and (v < lo or v > hi)
    if op == "<":
        return lo < v, full and hi < v
    if op == "<=":
        return lo <= v, full and hi <= v
    if op == ">":
        return hi > v, full and lo > v
    return hi >= v, full and lo >= v


# parsing -------------------------------------------------------------------

_TOKEN = re.compile(
    r"""\s*(?:
        (?P<num>-?\d+\.\d*(?:[eE][-+]?\d+)?|-?\d*\.\d+(?:[eE][-+]?\d+)?|-?\d+(?:[eE][-+]?\d+)?)
      | (?P<str>'(?:[^'\\]|\\.)*'|"(?:[^"\\]|\\.)*")
      | (?P<op>==|!=|<>|<=|>=|=|<|>|≠|≤|≥)
      | (?P<paren>[()])
      | (?P<word>[A-Za-z_][A-Za-z0-9_]*)
    )""",
    re.VERBOSE,
)


def _tokenize(text: str) -> list[tuple[str, object]]:
    tokens, pos = [], 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise QueryError(f"unexpected input at {pos}: {text[pos:pos + 12]!r}")
        pos = m.end()
        kind = m.lastgroup
        raw = m.group(kind)
        if kind == "num":
            is_float = any(ch in raw for ch in ".eE")
            tokens.append(("lit", float(raw) if is_float else int(raw)))
        elif kind == "str":
            tokens.append(("lit", re.sub(r"\\(.)", r"\1", raw[1:-1])))
        elif kind == "word":
            low = raw.lower()
            if low in ("and", "or", "not"):
                tokens.append((low, low))
            elif low in ("true", "false"):
                tokens.append(("lit", low == "true"))
            else:
                tokens.append(("ident", raw))
        else:
            tokens.append((kind, raw))
    return tokens


class _Parser:
    def __init__(self, tokens):
        self.tokens = tokens
        self.i = 0

    def peek(self):
        return self.tokens[self.i][0] if self.i < len(self.tokens) else None

    def take(self, kind):
        if self.peek() != kind:
            got = self.tokens[self.i][1] if self.i < len(self.tokens) else "end of input"
            raise QueryError(f"expected {kind}, got {got!r}")
        tok = self.tokens[self.i]
        self.i += 1
        return tok[1]

    def expr(self):
        node = self.conj()
        while self.peek() == "or":
            self.take("or")
            node = Or(node, self.conj())
        return node

    def conj(self):
        node = self.unary()
        while self.peek() == "and":
            self.take("and")
            node = And(node, self.unary())
        return node

    def unary(self):
        if self.peek() == "not":
            self.take("not")
            return Not(self.unary())
        if self.peek() == "paren" and self.tokens[self.i][1] == "(":
            self.i += 1
            node = self.expr()
            if self.peek() != "paren" or self.tokens[self.i][1] != ")":
                raise QueryError("missing ')'")
            self.i += 1
            return node
        column = self.take("ident")
        op = self.take("op")
        return Compare(column, op, self.take("lit"))


def parse(text: str) -> Predicate | None:
    """Parse a filter expression. Blank text means no filter."""
    tokens = _tokenize(text)
    if not tokens:
        return None
    p = _Parser(tokens)
    node = p.expr()
    if p.i != len(tokens):
        raise QueryError(f"trailing input: {tokens[p.i][1]!r}")
    return node
