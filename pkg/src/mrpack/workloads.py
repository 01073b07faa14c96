"""Synthetic workflows and their data.

Each generator returns ``(plan, inputs)``: a fully annotated plan (schemas,
filters, dataset layouts) and the in-memory base datasets it reads. Call
:func:`install_profiles` to run the plan once and attach measured profiles.
"""

from __future__ import annotations

import numpy as np

from .executor import dataset_stats, layout_records, profile_from_trace, run_plan
from .ir import (
    ClusterSpec,
    Configuration,
    Dataset,
    DatasetAnnotations,
    FilterAnnotation,
    Job,
    JobAnnotations,
    Layout,
    PartitionSpec,
    Plan,
    Predicate,
    Program,
    SchemaAnnotation,
    Stage,
    UdfRef,
    validate,
    write_stage,
)

WORKLOADS = ("tfidf", "coauthor", "loganalysis", "pagerank", "tpch17", "reportgen", "postproc", "logicalsplit")


class UnknownWorkloadError(KeyError):
    pass


class _Builder:
    def __init__(self):
        self.plan = Plan()
        self.inputs = {}

    def base(self, did, key_fields, value_fields, records, layout=None):
        layout = layout or Layout(partition_count=4)
        ds = layout_records(records, layout)
        n, b = dataset_stats(ds)
        self.plan.datasets[did] = Dataset(did, f"/data/{did}", layout,
                                          DatasetAnnotations(float(b), float(n), key_fields, value_fields))
        self.inputs[did] = ds

    def job(self, jid, inputs, output, out_fields, mapf, reducef=None, *, k1, v1, k2, v2, k3=None, v3=None,
            combine=None, where=None, maps=4, reduces=4, partition=None):
        prog = Program([Stage("map", mapf)], [Stage("reduce", reducef)] if reducef else [], combine,
                       partition or PartitionSpec())
        (prog.reduce_pipeline or prog.map_pipeline).append(write_stage(output))
        ann = JobAnnotations(SchemaAnnotation(list(k1), list(v1), list(k2), list(v2),
                                              None if k3 is None else list(k3), None if v3 is None else list(v3)))
        if where:
            ann.filter = FilterAnnotation([Predicate(*p) for p in where])
        cfg = Configuration(maps, 0 if reducef is None else reduces, combiner_enabled=combine is not None)
        self.plan.jobs[jid] = Job(jid, prog, cfg, ann)
        kf, vf = out_fields
        self.plan.datasets.setdefault(output, Dataset(output, f"/data/{output}", Layout(),
                                                      DatasetAnnotations(key_fields=kf, value_fields=vf)))
        for d in inputs:
            self.plan.edges.append((jid, d, "input"))
        self.plan.edges.append((jid, output, "output"))

    def done(self, cluster=None):
        from .transforms import refresh_layouts
        self.plan.cluster = cluster or ClusterSpec.desk()
        refresh_layouts(self.plan)
        validate(self.plan)
        return self.plan, self.inputs


def _proj(key, value, where=None, compute=None):
    args = {"key": list(key), "value": list(value)}
    if where:
        args["where"] = [list(w) for w in where]
    if compute:
        args["compute"] = compute
    return UdfRef("project", args)


def _agg(*aggs, key=None, where=None):
    args = {"aggs": [list(a) for a in aggs]}
    if key is not None:
        args["key"] = list(key)
    if where:
        args["where"] = [list(w) for w in where]
    return UdfRef("aggregate", args)


I, S, F = "int", "str", "float"


# ---------------------------------------------------------------------------
# the eight workflows


def reportgen(scale=10_000, seed=0):
    """Seven-job report over a lineitem-like table: two cleaning jobs, a
    customer join, a projection and three aggregates."""
    rng = np.random.default_rng(seed)
    n_orders = max(20, scale // 4)
    n_cust = max(10, scale // 40)
    oid = rng.integers(0, n_orders, scale)
    rows = []
    for i, o in enumerate(oid):
        o = int(o)
        rows.append(({"custid": (o * 7919) % n_cust},
                     {"orderid": o, "shipzipcode": int(rng.integers(0, 3)) + 10 * (o % 5),
                      "price": int(rng.integers(1, 100)), "line": i}))
    cust = [({"custid": c}, {"region": f"r{c % 7}"}) for c in range(n_cust)]
    b = _Builder()
    b.base("D01", [["custid", I]], [["orderid", I], ["shipzipcode", I], ["price", I], ["line", I]], rows)
    b.base("D02", [["custid", I]], [["region", S]], cust,
           Layout("hash", ["custid"], ["custid"], partition_count=4))
    od = ["orderid", "shipzipcode", "price", "line"]
    b.job("J1", ["D01"], "D1", ([["custid", I]], [[f, I] for f in od] + [["side", S]]),
          _proj(["custid"], od + ["side"], where=[["price", ">", 0]], compute={"side": ["const", "price", "L"]}),
          UdfRef("identity_reduce"), k1=["custid"], v1=od, k2=["custid"], v2=od + ["side"],
          where=[["price", ">", 0]])
    b.job("J2", ["D02"], "D2", ([["custid", I]], [["region", S], ["side", S]]),
          _proj(["custid"], ["region", "side"], compute={"side": ["const", "region", "R"]}),
          _agg(["max", "region", "region"], ["max", "side", "side"]),
          k1=["custid"], v1=["region"], k2=["custid"], v2=["region", "side"])
    b.job("J3", ["D1", "D2"], "D3", ([["orderid", I], ["shipzipcode", I]],
                                     [["custid", I], ["price", I], ["line", I], ["region", S]]),
          UdfRef("identity"),
          UdfRef("join", {"key": ["orderid", "shipzipcode"], "value": ["custid", "price", "line", "region"]}),
          k1=["custid"], v1=od + ["region", "side"], k2=["custid"], v2=od + ["region", "side"],
          k3=["orderid", "shipzipcode"], v3=["custid", "price", "line", "region"])
    b.job("J4", ["D3"], "D4", ([["orderid", I], ["shipzipcode", I]], [["price", I], ["line", I], ["region", S]]),
          _proj(["orderid", "shipzipcode"], ["price", "line", "region"]),
          k1=["orderid", "shipzipcode"], v1=["custid", "price", "line", "region"],
          k2=["orderid", "shipzipcode"], v2=["price", "line", "region"])
    b.job("J5", ["D4"], "D5", ([["orderid", I], ["shipzipcode", I]], [["total", I], ["n", I]]),
          _proj(["orderid", "shipzipcode"], ["price"], where=[["price", ">=", 5]]),
          _agg(["sum", "price", "total"], ["count", "price", "n"]),
          k1=["orderid", "shipzipcode"], v1=["price", "line", "region"],
          k2=["orderid", "shipzipcode"], v2=["price"], k3=["orderid", "shipzipcode"], v3=["total", "n"],
          where=[["price", ">=", 5]])
    b.job("J6", ["D4"], "D6", ([["orderid", I]], [["top", I]]),
          _proj(["orderid"], ["price"], where=[["orderid", "<", 100]]),
          _agg(["max", "price", "top"]),
          k1=["orderid", "shipzipcode"], v1=["price", "line", "region"],
          k2=["orderid"], v2=["price"], k3=["orderid"], v3=["top"], where=[["orderid", "<", 100]])
    b.job("J7", ["D5"], "D7", ([["orderid", I]], [["total", I], ["zips", I]]),
          _proj(["orderid"], ["shipzipcode", "total"]),
          _agg(["sum", "total", "total"], ["count_distinct", "shipzipcode", "zips"]),
          k1=["orderid", "shipzipcode"], v1=["total", "n"], k2=["orderid"], v2=["shipzipcode", "total"],
          k3=["orderid"], v3=["total", "zips"])
    return b.done()


def tfidf(scale=10_000, seed=0):
    """Term weights in three jobs: per word-and-document counts, per-document
    totals, per-word document frequency."""
    rng = np.random.default_rng(seed)
    n_docs = max(5, scale // 100)
    vocab = max(20, scale // 20)
    words = rng.zipf(1.3, scale) % vocab
    docs = rng.integers(0, n_docs, scale)
    rows = [({"doc": int(d)}, {"word": f"w{int(w):05d}", "pos": i}) for i, (d, w) in enumerate(zip(docs, words))]
    b = _Builder()
    b.base("D0", [["doc", I]], [["word", S], ["pos", I]], rows,
           Layout("hash", ["doc"], ["doc", "word"], partition_count=4))
    b.job("J1", ["D0"], "D1", ([["doc", I], ["word", S]], [["n", I]]),
          _proj(["doc", "word"], ["one"], compute={"one": ["const", "pos", 1]}),
          _agg(["sum", "one", "n"]), combine=UdfRef("partial_sum", {"fields": ["one"]}),
          k1=["doc"], v1=["word", "pos"], k2=["doc", "word"], v2=["one"], k3=["doc", "word"], v3=["n"])
    b.job("J2", ["D1"], "D2", ([["word", S]], [["doc", I], ["n", I], ["N", I]]),
          _proj(["doc"], ["word", "n"]),
          UdfRef("broadcast", {"aggs": [["sum", "n", "N"]], "key": ["word"], "value": ["doc", "n", "N"]}),
          k1=["doc", "word"], v1=["n"], k2=["doc"], v2=["word", "n"], k3=["word"], v3=["doc", "n", "N"])
    b.job("J3", ["D2"], "D3", ([["word", S], ["doc", I]], [["tfidf", F]]),
          UdfRef("identity"), UdfRef("tfidf_weight", {"total_docs": n_docs}),
          k1=["word"], v1=["doc", "n", "N"], k2=["word"], v2=["doc", "n", "N"], k3=["word", "doc"], v3=["tfidf"])
    return b.done()


def coauthor(scale=5_000, seed=0):
    """Co-author pair counts and the most prolific pairs."""
    rng = np.random.default_rng(seed)
    n_papers = max(10, scale // 3)
    n_auth = max(10, scale // 5)
    rows = []
    for p in range(n_papers):
        k = int(rng.integers(1, 5))
        for a in rng.zipf(1.5, k) % n_auth:
            rows.append(({"paper": p}, {"author": f"a{int(a):04d}"}))
    b = _Builder()
    b.base("D0", [["paper", I]], [["author", S]], rows)
    b.job("J1", ["D0"], "D1", ([["a1", S], ["a2", S]], [["one", I]]),
          _proj(["paper"], ["author"]), UdfRef("pairs"),
          k1=["paper"], v1=["author"], k2=["paper"], v2=["author"], k3=["a1", "a2"], v3=["one"])
    b.job("J2", ["D1"], "D2", ([["a1", S], ["a2", S]], [["n", I]]),
          UdfRef("identity"), _agg(["sum", "one", "n"]), combine=UdfRef("partial_sum", {"fields": ["one"]}),
          k1=["a1", "a2"], v1=["one"], k2=["a1", "a2"], v2=["one"], k3=["a1", "a2"], v3=["n"])
    b.job("J3", ["D2"], "D3", ([["a1", S], ["a2", S]], [["n", I]]),
          _proj(["bucket"], ["a1", "a2", "n"], compute={"bucket": ["const", "n", 0]}),
          UdfRef("topk", {"k": 20, "field": "n", "key": ["a1", "a2"], "value": ["n"]}),
          k1=["a1", "a2"], v1=["n"], k2=["bucket"], v2=["a1", "a2", "n"], k3=["a1", "a2"], v3=["n"],
          reduces=1)
    return b.done()


def loganalysis(scale=10_000, seed=0):
    """Per-user and per-url statistics over a web log read by two jobs."""
    rng = np.random.default_rng(seed)
    n_users = max(10, scale // 50)
    n_urls = max(10, scale // 100)
    users = rng.zipf(1.4, scale) % n_users
    urls = rng.zipf(1.2, scale) % n_urls
    rows = [({"ts": i}, {"user": f"u{int(u):04d}", "url": f"/p{int(p):03d}", "bytes": int(rng.integers(100, 5000))})
            for i, (u, p) in enumerate(zip(users, urls))]
    b = _Builder()
    b.base("D0", [["ts", I]], [["user", S], ["url", S], ["bytes", I]], rows)
    b.job("J1", ["D0"], "D1", ([["user", S]], [["hits", I], ["volume", I]]),
          _proj(["user"], ["bytes"]), _agg(["count", "bytes", "hits"], ["sum", "bytes", "volume"]),
          k1=["ts"], v1=["user", "url", "bytes"], k2=["user"], v2=["bytes"], k3=["user"], v3=["hits", "volume"])
    b.job("J2", ["D0"], "D2", ([["url", S]], [["hits", I]]),
          _proj(["url"], ["one"], compute={"one": ["const", "ts", 1]}), _agg(["sum", "one", "hits"]),
          combine=UdfRef("partial_sum", {"fields": ["one"]}),
          k1=["ts"], v1=["user", "url", "bytes"], k2=["url"], v2=["one"], k3=["url"], v3=["hits"])
    b.job("J3", ["D1"], "D3", ([["user", S]], [["hits", I], ["volume", I]]),
          _proj(["user"], ["hits", "volume"], where=[["hits", ">=", 5]]),
          k1=["user"], v1=["hits", "volume"], k2=["user"], v2=["hits", "volume"], where=[["hits", ">=", 5]])
    b.job("J4", ["D3"], "D4", ([["tier", I]], [["users", I], ["volume", I]]),
          _proj(["tier"], ["user", "volume"], compute={"tier": ["bucket", "hits", 10]}),
          _agg(["count", "user", "users"], ["sum", "volume", "volume"]),
          k1=["user"], v1=["hits", "volume"], k2=["tier"], v2=["user", "volume"], k3=["tier"], v3=["users", "volume"])
    return b.done()


def pagerank(scale=2_000, seed=0):
    """Two power iterations followed by a top-k ranking."""
    rng = np.random.default_rng(seed)
    n = max(10, scale)
    rows = []
    for p in range(n):
        k = int(rng.integers(1, 5))
        outs = sorted({int(x) for x in rng.zipf(1.6, k) % n} - {p}) or [(p + 1) % n]
        rows.append(({"page": p}, {"links": ";".join(map(str, outs)), "rank": 1.0}))
    b = _Builder()
    b.base("D0", [["page", I]], [["links", S], ["rank", F]], rows)
    for i, (src, dst) in enumerate((("D0", "D1"), ("D1", "D2")), 1):
        b.job(f"J{i}", [src], dst, ([["page", I]], [["rank", F], ["links", S]]),
              UdfRef("pagerank_scatter"), UdfRef("pagerank_update"),
              k1=["page"], v1=["links", "rank"], k2=["page"], v2=["links", "contrib"], k3=["page"],
              v3=["rank", "links"])
    # page ids are parsed from the link list, so they are not a flowing field
    for jid in ("J1", "J2"):
        b.plan.jobs[jid].annotations.schema.map_flow = []
    b.job("J3", ["D2"], "D3", ([["page", I]], [["rank", F]]),
          _proj(["bucket"], ["page", "rank"], compute={"bucket": ["const", "page", 0]}),
          UdfRef("topk", {"k": 10, "field": "rank", "key": ["page"], "value": ["rank"]}),
          k1=["page"], v1=["rank", "links"], k2=["bucket"], v2=["page", "rank"], k3=["page"], v3=["rank"],
          reduces=1)
    return b.done()


def tpch17(scale=10_000, seed=0):
    """Small-quantity-order revenue: part filter, per-part averages, a join
    and a final aggregate."""
    rng = np.random.default_rng(seed)
    n_parts = max(10, scale // 20)
    parts = [({"partkey": p}, {"brand": f"B{p % 5}", "container": f"C{p % 3}"}) for p in range(n_parts)]
    li = [({"lineno": i}, {"partkey": int(rng.integers(0, n_parts)), "qty": int(rng.integers(1, 50)),
                           "price": int(rng.integers(100, 10_000))}) for i in range(scale)]
    b = _Builder()
    b.base("P", [["partkey", I]], [["brand", S], ["container", S]], parts)
    b.base("L", [["lineno", I]], [["partkey", I], ["qty", I], ["price", I]], li)
    b.job("J1", ["P"], "D1", ([["partkey", I]], [["side", S]]),
          _proj(["partkey"], ["side"], where=[["brand", "=", "B2"]], compute={"side": ["const", "brand", "R"]}),
          k1=["partkey"], v1=["brand", "container"], k2=["partkey"], v2=["side"], where=[["brand", "=", "B2"]])
    b.job("J2", ["L"], "D2", ([["partkey", I]], [["qty", I], ["price", I], ["avgqty", F], ["side", S]]),
          _proj(["partkey"], ["qty", "price", "side"], compute={"side": ["const", "qty", "L"]}),
          UdfRef("broadcast", {"aggs": [["avg", "qty", "avgqty"]], "key": ["partkey"],
                               "value": ["qty", "price", "avgqty", "side"]}),
          k1=["lineno"], v1=["partkey", "qty", "price"], k2=["partkey"], v2=["qty", "price", "side"],
          k3=["partkey"], v3=["qty", "price", "avgqty", "side"])
    b.job("J3", ["D1", "D2"], "D3", ([["partkey", I]], [["qty", I], ["price", I], ["avgqty", F]]),
          UdfRef("identity"), UdfRef("join", {"key": ["partkey"], "value": ["qty", "price", "avgqty"]}),
          k1=["partkey"], v1=["qty", "price", "avgqty", "side"], k2=["partkey"], v2=["qty", "price", "avgqty", "side"],
          k3=["partkey"], v3=["qty", "price", "avgqty"])
    b.job("J4", ["D3"], "D4", ([["all", I]], [["revenue", I], ["lines", I]]),
          _proj(["all"], ["price"], where=[["qty", "<", 10]], compute={"all": ["const", "qty", 0]}),
          _agg(["sum", "price", "revenue"], ["count", "price", "lines"]),
          k1=["partkey"], v1=["qty", "price", "avgqty"], k2=["all"], v2=["price"], k3=["all"], v3=["revenue", "lines"],
          where=[["qty", "<", 10]], reduces=1)
    return b.done()


def postproc(scale=1_000, seed=0):
    """Three small post-processing jobs: one summary feeding two reports.

    Ships with a cluster sized like the in-process executor, where jobs
    start for free and only slot time matters.
    """
    rng = np.random.default_rng(seed)
    rows = [({"id": i}, {"grp": int(g), "val": int(v)})
            for i, (g, v) in enumerate(zip(rng.integers(0, 50, scale), rng.integers(0, 1000, scale)))]
    b = _Builder()
    b.base("D0", [["id", I]], [["grp", I], ["val", I]], rows)
    b.job("J1", ["D0"], "D1", ([["grp", I]], [["total", I], ["n", I]]),
          _proj(["grp"], ["val"]), _agg(["sum", "val", "total"], ["count", "val", "n"]),
          k1=["id"], v1=["grp", "val"], k2=["grp"], v2=["val"], k3=["grp"], v3=["total", "n"], maps=2, reduces=2)
    b.job("J2", ["D1"], "D2", ([["band", I]], [["groups", I]]),
          _proj(["band"], ["grp"], compute={"band": ["bucket", "total", 5000]}), _agg(["count", "grp", "groups"]),
          k1=["grp"], v1=["total", "n"], k2=["band"], v2=["grp"], k3=["band"], v3=["groups"], maps=2, reduces=2)
    b.job("J3", ["D1"], "D3", ([["size", I]], [["total", I]]),
          _proj(["size"], ["total"], compute={"size": ["bucket", "n", 10]}), _agg(["sum", "total", "total"]),
          k1=["grp"], v1=["total", "n"], k2=["size"], v2=["total"], k3=["size"], v3=["total"], maps=2, reduces=2)
    cluster = ClusterSpec(node_count=1, map_slots_per_node=4, reduce_slots_per_node=2, per_slot_memory_mb=256,
                          disk_mbps=100.0, network_mbps=100.0, task_startup_s=0.05, job_startup_s=0.0)
    return b.done(cluster)


def logicalsplit(scale=10_000, seed=0):
    """One order summary split by orderid range into three reports."""
    rng = np.random.default_rng(seed)
    rows = [({"line": i}, {"orderid": int(o), "price": int(p)})
            for i, (o, p) in enumerate(zip(rng.integers(0, 1000, scale), rng.integers(1, 100, scale)))]
    b = _Builder()
    b.base("D0", [["line", I]], [["orderid", I], ["price", I]], rows)
    b.job("J1", ["D0"], "D1", ([["orderid", I]], [["total", I], ["n", I]]),
          _proj(["orderid"], ["price"]), _agg(["sum", "price", "total"], ["count", "price", "n"]),
          k1=["line"], v1=["orderid", "price"], k2=["orderid"], v2=["price"], k3=["orderid"], v3=["total", "n"])
    splits = (("J2", "<", 100), ("J3", ">=", 500), ("J4", ">=", 900))
    for jid, op, lit in splits:
        out = "D" + jid[1:]
        b.job(jid, ["D1"], out, ([["orderid", I]], [["total", I]]),
              _proj(["orderid"], ["total"], where=[["orderid", op, lit]]),
              k1=["orderid"], v1=["total", "n"], k2=["orderid"], v2=["total"], where=[["orderid", op, lit]])
    return b.done()


GENERATORS = {
    "tfidf": tfidf,
    "coauthor": coauthor,
    "loganalysis": loganalysis,
    "pagerank": pagerank,
    "tpch17": tpch17,
    "reportgen": reportgen,
    "postproc": postproc,
    "logicalsplit": logicalsplit,
}


def generate(name, scale=None, seed=0, profile=True, registry=None):
    """Build workload ``name``; with ``profile`` the plan carries measured
    profile annotations."""
    if name not in GENERATORS:
        raise UnknownWorkloadError(f"unknown workload {name!r}; choose from {', '.join(WORKLOADS)}")
    fn = GENERATORS[name]
    plan, inputs = fn(seed=seed) if scale is None else fn(scale=scale, seed=seed)
    if profile:
        install_profiles(plan, inputs, registry)
    return plan, inputs


def install_profiles(plan, inputs, registry=None):
    """Run ``plan`` once; attach job profiles and dataset sizes in place."""
    outputs, trace = run_plan(plan, registry, inputs, keep_keys=True)
    for jid, jt in trace.jobs.items():
        plan.jobs[jid].annotations.profile = profile_from_trace(plan, jid, jt, trace.map_keys.get(jid))
    for d, ds in {**inputs, **outputs}.items():
        n, b = dataset_stats(ds)
        plan.datasets[d].annotations.records = float(n)
        plan.datasets[d].annotations.size_bytes = float(b)
    return plan


def uniform_records(n, fields, seed=0, hi=1000):
    rng = np.random.default_rng(seed)
    return [({"id": i}, {f: int(rng.integers(0, hi)) for f in fields}) for i in range(n)]


def powerlaw_records(n, fields, seed=0, exponent=1.5, hi=1000):
    rng = np.random.default_rng(seed)
    return [({"id": i}, {f: int(rng.zipf(exponent) % hi) for f in fields}) for i in range(n)]
