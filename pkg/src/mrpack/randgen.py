"""Random annotated plans for property tests.

Plans have 2 to 6 jobs over small integer tables. Every job is one of a few
safe shapes (filter, re-key, aggregate, shuffle, distinct) so the schema and
filter annotations are exact by construction.
"""

from __future__ import annotations

import numpy as np

from .ir import COMPARATORS, ClusterSpec, Layout, UdfRef
from .workloads import _Builder, _proj

SHAPES = ("filter", "rekey", "aggregate", "shuffle", "distinct")
AGGS = ("sum", "count", "max", "min", "count_distinct")


def _ints(names):
    return [[f, "int"] for f in names]


def _subset(rng, items, lo, hi):
    k = int(rng.integers(lo, min(hi, len(items)) + 1))
    idx = sorted(rng.choice(len(items), size=k, replace=False))
    return [items[i] for i in idx]


def _where(rng, fields, p=0.5):
    if rng.random() >= p:
        return None
    return [[str(rng.choice(fields)), str(rng.choice(COMPARATORS)), int(rng.integers(0, 12))]]


def random_plan(seed, n_jobs=None, records=None):
    """Return ``(plan, inputs)`` for ``seed``."""
    rng = np.random.default_rng(seed)
    n_jobs = n_jobs or int(rng.integers(2, 7))
    b = _Builder()
    schemas = {}
    for d in range(int(rng.integers(1, 3))):
        did = f"B{d}"
        vals = [f"f{i}" for i in range(int(rng.integers(2, 5)))]
        n = records or int(rng.integers(30, 121))
        rows = [({"id": i}, {f: int(rng.integers(0, 12)) for f in vals}) for i in range(n)]
        layout = Layout(partition_count=int(rng.integers(1, 5)))
        if rng.random() < 0.3:
            layout = Layout("hash", ["id"], ["id"], partition_count=layout.partition_count)
        b.base(did, _ints(["id"]), _ints(vals), rows, layout)
        schemas[did] = (["id"], vals)
    readers = {}
    for j in range(1, n_jobs + 1):
        jid, out = f"J{j}", f"D{j}"
        pool = sorted(schemas)
        # favour recent outputs for chains, shared inputs for horizontal packing
        weights = np.array([3.0 if d.startswith("D") else 1.0 for d in pool]) + [readers.get(d, 0) for d in pool]
        src = pool[int(rng.choice(len(pool), p=weights / weights.sum()))]
        readers[src] = readers.get(src, 0) + 1
        kf, vf = schemas[src]
        fields = kf + vf
        shape = str(rng.choice(SHAPES))
        where = _where(rng, fields)
        maps, reduces = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        common = dict(k1=kf, v1=vf, where=where, maps=maps, reduces=reduces)
        if shape == "filter":
            b.job(jid, [src], out, (_ints(kf), _ints(vf)), _proj(kf, vf, where), k2=kf, v2=vf, **common)
            schemas[out] = (kf, vf)
        elif shape == "rekey":
            extra = f"c{j}"
            compute = {extra: [str(rng.choice(["mod", "add", "bucket"])), str(rng.choice(fields)), int(rng.integers(2, 5))]}
            allf = fields + [extra]
            k2 = _subset(rng, allf, 1, 2)
            v2 = [f for f in allf if f not in k2]
            b.job(jid, [src], out, (_ints(k2), _ints(v2)), _proj(k2, v2, where, compute), k2=k2, v2=v2, **common)
            schemas[out] = (k2, v2)
        else:
            k2 = _subset(rng, fields, 1, 2)
            rest = [f for f in fields if f not in k2] or [k2[0]]
            combine = None
            if shape == "aggregate":
                aggs = []
                for n, src_f in enumerate(_subset(rng, rest, 1, 2)):
                    aggs.append([str(rng.choice(AGGS)), src_f, f"a{j}_{n}"])
                v2 = sorted({a[1] for a in aggs})
                v3 = [a[2] for a in aggs]
                reducef = UdfRef("aggregate", {"aggs": aggs})
                if all(a[0] == "sum" for a in aggs) and rng.random() < 0.6:
                    combine = UdfRef("partial_sum", {"fields": v2})
            elif shape == "shuffle":
                v2 = [f for f in fields if f not in k2]
                v3 = v2
                reducef = UdfRef("identity_reduce")
            else:
                v2, v3 = [], []
                reducef = UdfRef("distinct")
            b.job(jid, [src], out, (_ints(k2), _ints(v3)), _proj(k2, v2, where), reducef, k2=k2, v2=v2,
                  k3=k2, v3=v3, combine=combine, **common)
            schemas[out] = (k2, v3)
    return b.done(ClusterSpec.desk())

