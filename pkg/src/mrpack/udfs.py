"""UDF registry and the built-in parametrised functions.

Records are ``(key, value)`` pairs of flat dicts. Map functions take one
record and return a list of records. Reduce and combine functions take a key
and the list of values of one group, already in canonical order, and return a
list of records. Every registered function must be deterministic.
"""

from __future__ import annotations

import json
import math

from .ir import Predicate, canon


class UdfResolutionError(LookupError):
    pass


class UdfRegistry:
    """Maps ``(kind, name)`` to factories; ``resolve`` binds a UdfRef's args."""

    KINDS = ("map", "reduce", "combine", "partition")

    def __init__(self):
        self._factories = {k: {} for k in self.KINDS}
        self._cache = {}

    def register(self, kind, name, factory):
        self._factories[kind][name] = factory
        return factory

    def map(self, name):
        return lambda f: self.register("map", name, f)

    def reduce(self, name):
        return lambda f: self.register("reduce", name, f)

    def combine(self, name):
        return lambda f: self.register("combine", name, f)

    def names(self, kind):
        return sorted(self._factories[kind])

    def resolve(self, kind, ref):
        # combine functions share the reduce calling convention
        table = self._factories["combine" if kind == "combine" else kind]
        if ref.name not in table and kind == "combine":
            table = self._factories["reduce"]
        if ref.name not in table:
            raise UdfResolutionError(f"no {kind} function registered as {ref.name!r}")
        key = (kind, ref.name, json.dumps(ref.args, sort_keys=True))
        fn = self._cache.get(key)
        if fn is None:
            fn = table[ref.name](**ref.args)
            self._cache[key] = fn
        return fn

    def copy(self):
        new = UdfRegistry()
        for k in self.KINDS:
            new._factories[k] = dict(self._factories[k])
        return new


BUILTINS = UdfRegistry()


def default_registry():
    return BUILTINS.copy()


def _preds(where):
    return [Predicate(*p) for p in (where or [])]


def _passes(preds, rec):
    return all(p.holds(rec.get(p.field)) for p in preds)


# -- computed columns -------------------------------------------------------

def _compute(op, rec, src, arg):
    v = rec.get(src)
    if op == "mod":
        return v % arg
    if op == "floordiv":
        return v // arg
    if op == "add":
        return v + arg
    if op == "mul":
        return v * arg
    if op == "concat":
        return f"{v}{arg}"
    if op == "bucket":
        return int(v // arg) * arg
    if op == "const":
        return arg
    raise ValueError(f"unknown compute op {op!r}")


# -- map functions ----------------------------------------------------------

@BUILTINS.map("identity")
def _identity():
    def fn(key, value):
        return [(key, value)]
    return fn


@BUILTINS.map("project")
def _project(key=(), value=(), where=None, compute=None):
    """Re-key a record: choose key and value fields by name, optionally
    filter (``where``) and derive new fields (``compute``: name -> [op,
    source, arg])."""
    preds = _preds(where)
    compute = compute or {}
    key, value = list(key), list(value)

    def fn(k, v):
        rec = {**k, **v}
        if preds and not _passes(preds, rec):
            return []
        for name, (op, src, arg) in compute.items():
            rec[name] = _compute(op, rec, src, arg)
        return [({f: rec.get(f) for f in key}, {f: rec.get(f) for f in value})]
    return fn


@BUILTINS.map("explode")
def _explode(key=(), value=(), copies=2, index_field="copy", where=None):
    """Emit ``copies`` records per input, numbered in ``index_field``."""
    preds = _preds(where)

    def fn(k, v):
        rec = {**k, **v}
        if preds and not _passes(preds, rec):
            return []
        out = []
        for i in range(copies):
            r = dict(rec)
            r[index_field] = i
            out.append(({f: r.get(f) for f in key}, {f: r.get(f) for f in value}))
        return out
    return fn


# -- reduce functions -------------------------------------------------------

def _agg(op, vals):
    if op == "count":
        return len(vals)
    vals = [x for x in vals if x is not None]
    if op == "sum":
        if all(isinstance(x, int) for x in vals):
            return sum(vals)
        return math.fsum(vals)
    if op == "max":
        return max(vals, key=canon) if vals else None
    if op == "min":
        return min(vals, key=canon) if vals else None
    if op == "avg":
        return math.fsum(vals) / len(vals) if vals else None
    if op == "count_distinct":
        return len(set(vals))
    raise ValueError(f"unknown aggregate {op!r}")


@BUILTINS.reduce("aggregate")
def _aggregate(aggs=(), key=None, where=None):
    """One output per group: the group key (or the ``key`` subset of it) and
    one value field per ``[op, source, target]`` aggregate. ``where`` filters
    the output (a HAVING clause)."""
    aggs = [tuple(a) for a in aggs]
    preds = _preds(where)

    def fn(k, values):
        out = {dst: _agg(op, [v.get(src) for v in values]) for op, src, dst in aggs}
        okey = dict(k) if key is None else {f: k.get(f) for f in key}
        if preds and not _passes(preds, {**okey, **out}):
            return []
        return [(okey, out)]
    return fn


@BUILTINS.reduce("identity_reduce")
def _identity_reduce():
    def fn(k, values):
        return [(dict(k), v) for v in values]
    return fn


@BUILTINS.reduce("distinct")
def _distinct():
    def fn(k, values):
        return [(dict(k), {})]
    return fn


@BUILTINS.reduce("broadcast")
def _broadcast(aggs=(), key=(), value=()):
    """Attach group aggregates to every record of the group, then re-key."""
    aggs = [tuple(a) for a in aggs]

    def fn(k, values):
        extra = {dst: _agg(op, [v.get(src) for v in values]) for op, src, dst in aggs}
        out = []
        for v in values:
            rec = {**k, **v, **extra}
            out.append(({f: rec.get(f) for f in key}, {f: rec.get(f) for f in value}))
        return out
    return fn


@BUILTINS.reduce("join")
def _join(side_field="side", left="L", right="R", key=(), value=()):
    """Equi-join within a group: every left value paired with every right
    value."""
    def fn(k, values):
        ls = [v for v in values if v.get(side_field) == left]
        rs = [v for v in values if v.get(side_field) == right]
        out = []
        for lv in ls:
            for rv in rs:
                rec = {**k, **rv, **lv}
                rec.pop(side_field, None)
                out.append(({f: rec.get(f) for f in key}, {f: rec.get(f) for f in value}))
        return out
    return fn


@BUILTINS.reduce("topk")
def _topk(k=20, field="n", key=(), value=()):
    def fn(gk, values):
        rows = [{**gk, **v} for v in values]
        rows.sort(key=lambda r: (canon(r.get(field)), sorted((n, canon(x)) for n, x in r.items())), reverse=True)
        return [({f: r.get(f) for f in key}, {f: r.get(f) for f in value}) for r in rows[:k]]
    return fn


@BUILTINS.reduce("pairs")
def _pairs(item="author", left="a1", right="a2"):
    """All ordered pairs (a < b) of distinct items in a group, keyed by pair."""
    def fn(k, values):
        items = sorted({v.get(item) for v in values}, key=canon)
        return [({left: a, right: b}, {"one": 1}) for i, a in enumerate(items) for b in items[i + 1:]]
    return fn


@BUILTINS.reduce("tfidf_weight")
def _tfidf_weight(total_docs=100, word="word", doc="doc", count="n", total="N"):
    def fn(k, values):
        df = len({v.get(doc) for v in values})
        idf = math.log(total_docs / df)
        return [({word: k.get(word), doc: v.get(doc)}, {"tfidf": round(v[count] / v[total] * idf, 12)})
                for v in values]
    return fn


@BUILTINS.reduce("pagerank_update")
def _pagerank_update(damping=0.85, page="page"):
    def fn(k, values):
        contrib = math.fsum(v.get("contrib") or 0.0 for v in values)
        links = next((v.get("links") for v in values if v.get("links") is not None), "")
        return [({page: k.get(page)}, {"rank": round(1 - damping + damping * contrib, 12), "links": links})]
    return fn


@BUILTINS.map("pagerank_scatter")
def _pagerank_scatter(page="page"):
    def fn(k, v):
        links = [x for x in (v.get("links") or "").split(";") if x]
        out = [({page: k.get(page)}, {"links": v.get("links"), "contrib": None})]
        for t in links:
            out.append(({page: t}, {"links": None, "contrib": v.get("rank", 1.0) / len(links)}))
        return out
    return fn


@BUILTINS.reduce("moments")
def _moments(x="x", y="y", kind="cov"):
    """Covariance or correlation of two fields over the group."""
    def fn(k, values):
        xs = [float(v.get(x)) for v in values]
        ys = [float(v.get(y)) for v in values]
        n = len(xs)
        mx, my = math.fsum(xs) / n, math.fsum(ys) / n
        cov = math.fsum((a - mx) * (b - my) for a, b in zip(xs, ys)) / n
        if kind == "cov":
            return [(dict(k), {"cov": round(cov, 9)})]
        sx = math.sqrt(math.fsum((a - mx) ** 2 for a in xs) / n)
        sy = math.sqrt(math.fsum((b - my) ** 2 for b in ys) / n)
        corr = cov / (sx * sy) if sx and sy else 0.0
        return [(dict(k), {"corr": round(corr, 9)})]
    return fn


# -- combine functions ------------------------------------------------------

@BUILTINS.combine("partial_sum")
def _partial_sum(fields=()):
    """Pre-aggregate integer sums; only valid ahead of a summing reducer."""
    fields = list(fields)

    def fn(k, values):
        return [(dict(k), {f: sum(v.get(f) or 0 for v in values) for f in fields})]
    return fn
