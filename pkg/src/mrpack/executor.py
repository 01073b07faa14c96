"""Deterministic in-memory MapReduce engine.

Runs plans, including packed pipelines and tagged bundles, over small
datasets. Used as the equivalence oracle for transformations and as the
profiler that produces profile annotations.
"""

from __future__ import annotations

import bisect
import copy
import heapq
import itertools
import json
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .ir import (
    Histogram,
    Layout,
    PhaseProfile,
    ProfileAnnotation,
    canon,
    main_outputs,
    topological_job_order,
    write_location,
)
from .udfs import default_registry


class ExecutionError(RuntimeError):
    def __init__(self, job, phase, message):
        super().__init__(f"job {job}, {phase} phase: {message}")
        self.job = job
        self.phase = phase


@dataclass
class InMemoryDataset:
    partitions: list
    layout: Layout = field(default_factory=Layout)

    def records(self):
        return [r for p in self.partitions for r in p]

    def __len__(self):
        return sum(len(p) for p in self.partitions)

    @classmethod
    def single(cls, records):
        return cls([list(records)], Layout(partition_count=1))


# -- canonical encodings -----------------------------------------------------

def _ckey(d):
    return tuple(sorted((n, canon(v)) for n, v in d.items()))


def record_canon(key, value):
    return (_ckey(key), _ckey(value))


def record_bytes(key, value):
    return len(json.dumps([key, value], separators=(",", ":"), sort_keys=True, default=str))


def _encode_scalar(v):
    if v is None:
        return "n:"
    if isinstance(v, bool):
        return f"b:{int(v)}"
    if isinstance(v, int):
        return f"i:{v}"
    if isinstance(v, float):
        return f"f:{v!r}"
    return f"s:{v}"


_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def hash_partition(values, n):
    data = "\x1f".join(_encode_scalar(v) for v in values).encode()
    return fnv1a64(data) % n


def range_partition(value, splits):
    return bisect.bisect_right([canon(s) for s in splits], canon(value))


# -- traces ------------------------------------------------------------------

@dataclass
class JobTrace:
    map_tasks: int = 0
    reduce_tasks: int = 0
    map_input_records: int = 0
    map_input_bytes: int = 0
    map_output_records: int = 0
    map_output_bytes: int = 0
    combine_input_records: int = 0
    combine_output_records: int = 0
    combine_output_bytes: int = 0
    shuffle_records: int = 0
    shuffle_bytes: int = 0
    reduce_input_records: int = 0
    reduce_groups: int = 0
    reduce_output_records: int = 0
    reduce_output_bytes: int = 0
    spills: int = 0
    output_records: dict = field(default_factory=dict)
    output_bytes: dict = field(default_factory=dict)
    map_side_writes: list = field(default_factory=list)
    bytes_read: dict = field(default_factory=dict)
    tag_records: dict = field(default_factory=dict)
    tag_seconds: dict = field(default_factory=dict)
    reduce_group_sizes: list = field(default_factory=list)
    seconds: dict = field(default_factory=lambda: defaultdict(float))

    def counters(self):
        """Every deterministic counter (wall-clock excluded)."""
        d = dict(self.__dict__)
        d.pop("seconds")
        d.pop("tag_seconds")
        return d


@dataclass
class RunTrace:
    jobs: dict = field(default_factory=dict)
    # key histograms of map output, per job (pre-combine)
    map_keys: dict = field(default_factory=dict)

    def counters(self):
        return {j: t.counters() for j, t in self.jobs.items()}

    def total_seconds(self):
        return sum(sum(t.seconds.values()) for t in self.jobs.values())


# -- engine ------------------------------------------------------------------

class _JobRun:
    def __init__(self, plan, job, registry, datasets, trace, keep_keys):
        self.plan = plan
        self.job = job
        self.reg = registry
        self.datasets = datasets
        self.t = trace
        self.keep_keys = keep_keys
        self.writes = defaultdict(dict)  # dataset -> task index -> records
        self.write_side = {}
        self.map_keys = []

    # stage interpretation
    def fn(self, kind, udf, phase):
        try:
            return self.reg.resolve(kind, udf)
        except LookupError as exc:
            raise ExecutionError(self.job.id, phase, str(exc)) from exc

    def run_stages(self, stages, recs, task, side, tag=None):
        for s in stages:
            if s.kind == "map":
                f = self.fn("map", s.udf, side)
                out = []
                for src, tg, k, v in recs:
                    for k2, v2 in f(k, v):
                        out.append((src, tg, k2, v2))
                recs = out
            elif s.kind in ("reduce", "combine"):
                f = self.fn(s.kind, s.udf, side)
                recs = self._contiguous_reduce(f, recs)
            elif s.kind == "write":
                self._write(s.dataset, task, side, recs)
            elif s.kind == "bundle":
                out = []
                for b in s.branches:
                    t0 = time.perf_counter()
                    if side == "map":
                        sub = [r for r in recs if b.source is None or r[0] == b.source]
                    else:
                        sub = [r for r in recs if r[1] == b.tag]
                    res = self.run_stages(b.stages, sub, task, side, tag=b.tag)
                    tr = self.t.tag_records.setdefault(side, {})
                    tr[b.tag] = tr.get(b.tag, [0, 0])
                    tr[b.tag][0] += len(sub)
                    tr[b.tag][1] += len(res)
                    ts = self.t.tag_seconds.setdefault(side, {})
                    ts[b.tag] = ts.get(b.tag, 0.0) + time.perf_counter() - t0
                    out.extend((src, b.tag, k, v) for src, _, k, v in res)
                recs = out
        return recs

    def _contiguous_reduce(self, f, recs):
        """Group consecutive records with equal key and invoke ``f`` per run,
        values in canonical order."""
        out = []
        for _, run in itertools.groupby(recs, key=lambda r: (r[1], _ckey(r[2]))):
            run = list(run)
            src, tg, k, _ = run[0]
            values = sorted((r[3] for r in run), key=_ckey)
            for k2, v2 in f(k, values):
                out.append((src, tg, k2, v2))
        return out

    def _write(self, dataset, task, side, recs):
        t0 = time.perf_counter()
        part = self.writes[dataset].setdefault(task, [])
        nbytes = 0
        for _, _, k, v in recs:
            part.append((dict(k), dict(v)))
            nbytes += record_bytes(k, v)
        self.write_side[dataset] = side
        self.t.output_records[dataset] = self.t.output_records.get(dataset, 0) + len(recs)
        self.t.output_bytes[dataset] = self.t.output_bytes.get(dataset, 0) + nbytes
        self.t.seconds["write"] += time.perf_counter() - t0

    # input splitting
    def map_inputs(self):
        job, plan = self.job, self.plan
        ins = plan.inputs_of(job.id)
        read = {}
        parts_by_ds = {}
        t0 = time.perf_counter()
        for d in ins:
            ds = self.datasets.get(d)
            if ds is None:
                raise ExecutionError(job.id, "read", f"input dataset {d} not available")
            sel = job.input_selection.get(d, range(len(ds.partitions)))
            parts_by_ds[d] = {}
            for p in sel:
                recs = ds.partitions[p]
                nbytes = sum(record_bytes(k, v) for k, v in recs)
                read.setdefault(d, {})[p] = nbytes
                parts_by_ds[d][p] = recs
        self.t.bytes_read = read
        self.t.map_input_bytes = sum(sum(v.values()) for v in read.values())
        ordered = job.constraint("orderPreservingInput")
        m = job.config.num_map_tasks
        tasks = []
        if ordered:
            counts = {len(self.datasets[d].partitions) for d in ins}
            if len(counts) != 1 or counts.pop() != m or job.input_selection:
                raise ExecutionError(job.id, "map", "task split violates orderPreservingInput: "
                                     f"{m} map tasks vs input partitions {[len(self.datasets[d].partitions) for d in ins]}")
            merge_fields = ordered[0].payload.get("merge_fields") or []
            for i in range(m):
                streams = [[(d, None, k, v) for k, v in parts_by_ds[d][i]] for d in ins]
                if len(streams) == 1:
                    tasks.append(streams[0])
                else:
                    keyf = self._merge_key(merge_fields)
                    tasks.append(list(heapq.merge(*streams, key=keyf)))
        else:
            allrecs = [(d, None, k, v) for d in ins for p in sorted(parts_by_ds[d]) for k, v in parts_by_ds[d][p]]
            q, r = divmod(len(allrecs), m)
            pos = 0
            for i in range(m):
                n = q + (1 if i < r else 0)
                tasks.append(allrecs[pos:pos + n])
                pos += n
        self.t.seconds["read"] += time.perf_counter() - t0
        self.t.map_input_records = sum(len(x) for x in tasks)
        return tasks

    def _merge_key(self, fields):
        def keyf(r):
            rec = {**r[2], **r[3]}
            return tuple(canon(rec.get(f)) for f in fields)
        return keyf

    # shuffle helpers
    def branch_specs(self):
        prog = self.job.program
        last = prog.map_pipeline[-1]
        if last.kind == "bundle":
            return {b.tag: (b.partition or prog.partition, b.combine) for b in last.branches}
        return {None: (prog.partition, prog.combine)}

    def partition_of(self, spec, key, n):
        fields = spec.partition_fields or sorted(key)
        try:
            vals = [key[f] for f in fields]
        except KeyError as exc:
            raise ExecutionError(self.job.id, "partition", f"partition-key field {exc} missing from record") from exc
        if spec.kind == "range":
            return range_partition(vals[0], spec.range_splits)
        return hash_partition(vals, n)

    def sort_key(self, spec, rec):
        _, tag, k, v = rec
        try:
            sk = tuple(canon(k[f]) for f in spec.effective_sort_fields())
        except KeyError as exc:
            raise ExecutionError(self.job.id, "sort", f"sort-key field {exc} missing from record") from exc
        return (-1 if tag is None else tag, sk, _ckey(k), _ckey(v))

    def run(self):
        job, t = self.job, self.t
        prog = job.program
        tasks = self.map_inputs()
        t.map_tasks = len(tasks)
        map_out = []
        for i, recs in enumerate(tasks):
            t0, w0 = time.perf_counter(), t.seconds["write"]
            out = self.run_stages(prog.map_pipeline, recs, i, "map")
            t.seconds["map"] += time.perf_counter() - t0 - (t.seconds["write"] - w0)
            t.map_output_records += len(out)
            map_out.append(out)
            if self.keep_keys:
                self.map_keys.extend(r[2] for r in out)
        t.map_output_bytes = sum(record_bytes(r[2], r[3]) for out in map_out for r in out)
        for d in list(self.writes):
            if self.write_side[d] == "map":
                t.map_side_writes.append(d)
        if prog.is_map_only():
            return self._finish(len(tasks), 0)

        specs = self.branch_specs()
        if job.config.combiner_enabled:
            t0 = time.perf_counter()
            map_out = [self._combine(out, specs) for out in map_out]
            t.seconds["combine"] += time.perf_counter() - t0
        t0 = time.perf_counter()
        nred = max(spec.num_partitions(job.config.num_reduce_tasks) for spec, _ in specs.values())
        buckets = [[] for _ in range(nred)]
        for out in map_out:
            for rec in out:
                spec = specs[rec[1]][0]
                buckets[self.partition_of(spec, rec[2], nred)].append(rec)
        nbytes = 0
        sort_mb = job.config.sort_buffer_mb * 2 ** 20
        for out in map_out:
            task_bytes = sum(record_bytes(r[2], r[3]) for r in out)
            nbytes += task_bytes
            t.spills += max(1, -(-task_bytes // sort_mb)) if out else 0
        t.shuffle_records = sum(len(b) for b in buckets)
        t.shuffle_bytes = nbytes
        for b in buckets:
            b.sort(key=lambda r: self.sort_key(specs[r[1]][0], r))
        t.seconds["sort"] += time.perf_counter() - t0
        t.reduce_tasks = nred
        t.reduce_input_records = t.shuffle_records
        for i, b in enumerate(buckets):
            sizes = [len(list(g)) for _, g in itertools.groupby(b, key=lambda r: (r[1], _ckey(r[2])))]
            t.reduce_groups += len(sizes)
            t.reduce_group_sizes.append(sorted(sizes, reverse=True)[:1])
            t0, w0 = time.perf_counter(), t.seconds["write"]
            out = self.run_stages(prog.reduce_pipeline, b, i, "reduce")
            t.seconds["reduce"] += time.perf_counter() - t0 - (t.seconds["write"] - w0)
            t.reduce_output_records += len(out)
            t.reduce_output_bytes += sum(record_bytes(r[2], r[3]) for r in out)
        return self._finish(len(tasks), nred)

    def _combine(self, recs, specs):
        groups = defaultdict(list)
        for r in recs:
            groups[(-1 if r[1] is None else r[1], _ckey(r[2]))].append(r)
        out = []
        t = self.t
        for gk in sorted(groups):
            run = groups[gk]
            src, tag, k, _ = run[0]
            comb = specs[tag][1]
            t.combine_input_records += len(run)
            if comb is None:
                out.extend(run)
                t.combine_output_records += len(run)
                continue
            f = self.fn("combine", comb, "combine")
            values = sorted((r[3] for r in run), key=_ckey)
            res = [(src, tag, k2, v2) for k2, v2 in f(k, values)]
            t.combine_output_records += len(res)
            t.combine_output_bytes += sum(record_bytes(r[2], r[3]) for r in res)
            out.extend(res)
        return out

    def _finish(self, nmap, nred):
        result = {}
        for d in self.plan.outputs_of(self.job.id):
            side, _ = write_location(self.job.program, d)
            n = nmap if side == "map" else nred
            parts = [self.writes[d].get(i, []) for i in range(n)]
            result[d] = InMemoryDataset(parts, copy.deepcopy(self.plan.datasets[d].layout))
        return result


def run_plan(plan, registry=None, inputs=None, keep_keys=False):
    """Execute every job in topological order.

    Returns ``(outputs, trace)`` where ``outputs`` maps every job-produced
    dataset id to an :class:`InMemoryDataset`.
    """
    registry = registry or default_registry()
    inputs = inputs or {}
    missing = [d for d in plan.base_datasets() if d not in inputs and plan.consumers_of(d)]
    if missing:
        raise ExecutionError("-", "read", f"base datasets not supplied: {missing}")
    datasets = dict(inputs)
    trace = RunTrace()
    outputs = {}
    for jid in topological_job_order(plan):
        job = plan.jobs[jid]
        jt = JobTrace()
        trace.jobs[jid] = jt
        run = _JobRun(plan, job, registry, datasets, jt, keep_keys)
        produced = run.run()
        if keep_keys:
            trace.map_keys[jid] = run.map_keys
        datasets.update(produced)
        outputs.update(produced)
    return outputs, trace


# -- comparison --------------------------------------------------------------

@dataclass
class CompareResult:
    equal: bool
    diffs: list

    def __bool__(self):
        return self.equal

    def report(self):
        return "equal" if self.equal else "\n".join(self.diffs)


def compare_outputs(a, b, limit=10):
    """Per-dataset multiset equality, ignoring partitioning and order."""
    diffs = []
    if set(a) != set(b):
        diffs.append(f"dataset sets differ: only-left={sorted(set(a) - set(b))} only-right={sorted(set(b) - set(a))}")
    for d in sorted(set(a) & set(b)):
        ca = Counter(record_canon(k, v) for k, v in a[d].records())
        cb = Counter(record_canon(k, v) for k, v in b[d].records())
        if ca == cb:
            continue
        for rec in sorted(set(ca) | set(cb)):
            if ca[rec] != cb[rec]:
                diffs.append(f"{d}: {rec} left x{ca[rec]} right x{cb[rec]}")
                if len(diffs) >= limit:
                    return CompareResult(False, diffs)
    return CompareResult(not diffs, diffs)


# -- profiling ---------------------------------------------------------------

def _phase(rin, rout, bin_, bout, secs):
    return PhaseProfile(float(rin), float(rout), float(bin_), float(bout), float(secs))


def _key_stats(keys):
    hists, distinct = {}, {}
    if not keys:
        return hists, distinct
    fields = sorted({f for k in keys for f in k})
    for f in fields:
        h = Histogram.build([k.get(f) for k in keys])
        if h is not None:
            hists[f] = h
    if len(fields) <= 4:
        for r in range(1, len(fields) + 1):
            for combo in itertools.combinations(fields, r):
                distinct[",".join(combo)] = len({tuple(canon(k.get(f)) for f in combo) for k in keys})
    return hists, distinct


def profile_from_trace(plan, jid, jt, keys=None):
    job = plan.jobs[jid]
    secs = jt.seconds
    out_bytes = sum(jt.output_bytes.values())
    mp = _phase(jt.map_input_records, jt.map_output_records, jt.map_input_bytes, jt.map_output_bytes, secs["map"])
    comb = red = None
    if not job.program.is_map_only():
        if job.config.combiner_enabled:
            comb = _phase(jt.combine_input_records, jt.combine_output_records, jt.map_output_bytes,
                          jt.combine_output_bytes, secs["combine"])
        red = _phase(jt.reduce_input_records, jt.reduce_output_records, jt.shuffle_bytes,
                     jt.reduce_output_bytes, secs["reduce"])
    hists, distinct = _key_stats(keys or [])
    io = {
        "read": secs["read"] / jt.map_input_bytes if jt.map_input_bytes else 0.0,
        "write": secs["write"] / out_bytes if out_bytes else 0.0,
        "spill": secs["sort"] / jt.shuffle_bytes if jt.shuffle_bytes else 0.0,
        "merge": 0.0,
        "shuffle": 0.0,
    }
    mains = main_outputs(job.program)
    side = {}
    for d, n in sorted(jt.output_records.items()):
        if d in mains:
            continue
        side[d] = [n / jt.map_input_records if jt.map_input_records else 0.0,
                   jt.output_bytes.get(d, 0) / n if n else 0.0]
    prof = ProfileAnnotation(map=mp, combine=comb, reduce=red, histograms=hists, distinct_keys=distinct,
                             io_costs=io, side_outputs=side)
    if job.program.is_bundled():
        prof.branches = _branch_profiles(job, jt)
    return prof


def _branch_profiles(job, jt):
    out = {}
    mtr = jt.tag_records.get("map", {})
    rtr = jt.tag_records.get("reduce", {})
    mts = jt.tag_seconds.get("map", {})
    rts = jt.tag_seconds.get("reduce", {})
    for tag, (rin, rout) in mtr.items():
        share = rin / jt.map_input_records if jt.map_input_records else 0.0
        avg_in = jt.map_input_bytes / jt.map_input_records if jt.map_input_records else 0.0
        avg_out = jt.map_output_bytes / jt.map_output_records if jt.map_output_records else 0.0
        mp = _phase(rin, rout, rin * avg_in, rout * avg_out, mts.get(tag, 0.0))
        red = None
        if tag in rtr:
            r_in, r_out = rtr[tag]
            avg_r = jt.reduce_output_bytes / jt.reduce_output_records if jt.reduce_output_records else 0.0
            red = _phase(r_in, r_out, r_in * avg_out, r_out * avg_r, rts.get(tag, 0.0))
        out[tag] = ProfileAnnotation(map=mp, reduce=red, io_costs={"share": share})
    return out


def collect_profile(plan, registry=None, inputs=None):
    """Run the plan once and turn its counters into profile annotations."""
    _, trace = run_plan(plan, registry, inputs, keep_keys=True)
    return {jid: profile_from_trace(plan, jid, jt, trace.map_keys.get(jid)) for jid, jt in trace.jobs.items()}


def dataset_stats(ds):
    """(records, bytes) of an in-memory dataset."""
    recs = ds.records()
    return len(recs), sum(record_bytes(k, v) for k, v in recs)


def layout_records(records, layout):
    """Place ``(key, value)`` records into partitions per ``layout`` and sort
    each partition by its declared sort fields (then canonically)."""
    n = max(1, layout.partition_count)
    parts = [[] for _ in range(n)]
    chunk = -(-len(records) // n) if records else 1
    for i, (k, v) in enumerate(records):
        rec = {**v, **k}
        if layout.partition_kind == "range":
            p = range_partition(rec[layout.partition_fields[0]], layout.range_bounds or [])
        elif layout.partition_kind == "hash":
            p = hash_partition([rec[f] for f in layout.partition_fields], n)
        else:
            p = i // chunk
        parts[p].append((dict(k), dict(v)))
    for part in parts:
        part.sort(key=lambda r: (tuple(canon({**r[1], **r[0]}[f]) for f in layout.sort_fields),) + record_canon(*r))
    return InMemoryDataset(parts, copy.deepcopy(layout))


# -- delimited text I/O ------------------------------------------------------

_TYPES = {"int": int, "float": float, "str": str, "bool": lambda s: s == "true"}


def _fmt(v):
    if v is None:
        return "\\N"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    s = str(v)
    if "\t" in s or "\n" in s:
        raise ValueError(f"delimiter inside string field: {s!r}")
    return s


def write_dataset(ds, directory, key_fields, value_fields):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, part in enumerate(ds.partitions):
        lines = []
        for k, v in part:
            row = [_fmt(k.get(n)) for n, _ in key_fields] + [_fmt(v.get(n)) for n, _ in value_fields]
            lines.append("\t".join(row))
        (directory / f"part-{i:05d}.tsv").write_text("".join(line + "\n" for line in lines))


def read_dataset(directory, key_fields, value_fields, layout=None):
    directory = Path(directory)
    files = sorted(directory.glob("part-*.tsv"))
    if not files:
        raise FileNotFoundError(f"no partition files under {directory}")
    parts = []
    nk = len(key_fields)
    for fp in files:
        part = []
        for line in fp.read_text().splitlines():
            cells = line.split("\t")
            if len(cells) != nk + len(value_fields):
                raise ValueError(f"{fp}: expected {nk + len(value_fields)} fields, got {len(cells)}")
            conv = [None if c == "\\N" else _TYPES[t](c) for c, (_, t) in zip(cells, key_fields + value_fields)]
            part.append(({n: x for (n, _), x in zip(key_fields, conv[:nk])},
                         {n: x for (n, _), x in zip(value_fields, conv[nk:])}))
        parts.append(part)
    return InMemoryDataset(parts, copy.deepcopy(layout) if layout else Layout(partition_count=len(parts)))
