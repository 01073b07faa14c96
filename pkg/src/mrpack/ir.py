"""Annotated workflow plans: data model, plan-file format, validation and
structural queries.

A plan is a bipartite DAG of jobs and datasets. Plans are treated as values:
every rewrite in :mod:`mrpack.transforms` works on a :func:`clone` and
returns a new plan.
"""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

SLOTS = ("K1", "V1", "K2", "V2", "K3", "V3")
COMPARATORS = ("<", "<=", "=", ">=", ">")
CONSTRAINT_KINDS = (
    "mapTasksEqualProducerReduceTasks",
    "orderPreservingInput",
    "partitionKeyFixed",
    "sortKeyFixed",
    "rangeSplitsFixed",
)
TAG_FIELD = "@tag"


class PlanParseError(ValueError):
    def __init__(self, message, line=None, path=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if path:
            where.append(f"at {path}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.path = path


class PlanValidationError(ValueError):
    """Raised when a plan violates a structural invariant.

    ``invariant`` is a short stable name of the violated rule.
    """

    def __init__(self, invariant, message):
        super().__init__(f"[{invariant}] {message}")
        self.invariant = invariant


# ---------------------------------------------------------------------------
# program model


@dataclass
class UdfRef:
    name: str
    args: dict = field(default_factory=dict)

    def to_dict(self):
        return {"name": self.name, "args": copy.deepcopy(self.args)}

    @classmethod
    def from_obj(cls, obj):
        if isinstance(obj, str):
            return cls(obj)
        return cls(obj["name"], dict(obj.get("args") or {}))

    def label(self):
        return self.name


@dataclass
class PartitionSpec:
    """How map output is partitioned across reduce tasks and sorted.

    Empty ``partition_fields`` means "the whole map-output key"; empty
    ``sort_fields`` means "sort on the partition fields".
    """

    kind: str = "hash"
    partition_fields: list = field(default_factory=list)
    sort_fields: list = field(default_factory=list)
    range_splits: list | None = None

    def effective_sort_fields(self):
        return list(self.sort_fields) if self.sort_fields else list(self.partition_fields)

    def num_partitions(self, num_reduce_tasks):
        if self.kind == "range":
            return len(self.range_splits) + 1
        return num_reduce_tasks

    def to_dict(self):
        return {
            "kind": self.kind,
            "partition_fields": list(self.partition_fields),
            "sort_fields": list(self.sort_fields),
            "range_splits": None if self.range_splits is None else list(self.range_splits),
        }

    @classmethod
    def from_obj(cls, obj):
        obj = obj or {}
        return cls(
            kind=obj.get("kind", "hash"),
            partition_fields=list(obj.get("partition_fields") or []),
            sort_fields=list(obj.get("sort_fields") or []),
            range_splits=None if obj.get("range_splits") is None else list(obj["range_splits"]),
        )


@dataclass
class Branch:
    """One tagged pipeline inside a horizontally packed stage.

    ``source`` restricts the branch to records read from one dataset (the
    concurrently-runnable case); ``None`` means every input record.
    """

    tag: int
    stages: list
    source: str | None = None
    partition: PartitionSpec | None = None
    combine: UdfRef | None = None

    def to_dict(self):
        return {
            "tag": self.tag,
            "source": self.source,
            "stages": [s.to_dict() for s in self.stages],
            "partition": None if self.partition is None else self.partition.to_dict(),
            "combine": None if self.combine is None else self.combine.to_dict(),
        }

    @classmethod
    def from_obj(cls, obj):
        return cls(
            tag=int(obj["tag"]),
            stages=[Stage.from_obj(s) for s in obj["stages"]],
            source=obj.get("source"),
            partition=None if obj.get("partition") is None else PartitionSpec.from_obj(obj["partition"]),
            combine=None if obj.get("combine") is None else UdfRef.from_obj(obj["combine"]),
        )


@dataclass
class Stage:
    kind: str  # map | reduce | combine | write | bundle
    udf: UdfRef | None = None
    dataset: str | None = None
    branches: list | None = None

    def to_dict(self):
        if self.kind == "write":
            return {"write": self.dataset}
        if self.kind == "bundle":
            return {"bundle": [b.to_dict() for b in self.branches]}
        return {self.kind: self.udf.to_dict()}

    @classmethod
    def from_obj(cls, obj):
        if not isinstance(obj, dict) or len(obj) != 1:
            raise PlanParseError(f"stage must be a single-key object, got {obj!r}")
        (kind, body), = obj.items()
        if kind == "write":
            return cls("write", dataset=body)
        if kind == "bundle":
            return cls("bundle", branches=[Branch.from_obj(b) for b in body])
        if kind not in ("map", "reduce", "combine"):
            raise PlanParseError(f"unknown stage kind {kind!r}")
        return cls(kind, udf=UdfRef.from_obj(body))

    def label(self):
        if self.kind == "write":
            return f"write({self.dataset})"
        if self.kind == "bundle":
            return "{" + "; ".join(f"t{b.tag}:" + ",".join(s.label() for s in b.stages) for b in self.branches) + "}"
        return self.udf.label()


def tail_writes(stages):
    """Datasets written by the trailing run of write stages."""
    out = []
    for s in reversed(stages):
        if s.kind != "write":
            break
        out.append(s.dataset)
    return out[::-1]


def map_stage(name, **args):
    return Stage("map", UdfRef(name, args))


def reduce_stage(name, **args):
    return Stage("reduce", UdfRef(name, args))


def write_stage(dataset):
    return Stage("write", dataset=dataset)


def iter_stages(stages):
    """Yield every stage, descending into bundle branches."""
    for s in stages:
        yield s
        if s.kind == "bundle":
            for b in s.branches:
                yield from iter_stages(b.stages)


@dataclass
class Program:
    map_pipeline: list
    reduce_pipeline: list = field(default_factory=list)
    combine: UdfRef | None = None
    partition: PartitionSpec = field(default_factory=PartitionSpec)

    @property
    def map_fn(self):
        return next((s.udf for s in self.map_pipeline if s.kind == "map"), None)

    @property
    def reduce_fn(self):
        return next((s.udf for s in self.reduce_pipeline if s.kind == "reduce"), None)

    @property
    def combine_fn(self):
        return self.combine

    def is_map_only(self):
        return not self.reduce_pipeline

    def is_bundled(self):
        return any(s.kind == "bundle" for s in self.map_pipeline + self.reduce_pipeline)

    def written(self):
        return [s.dataset for s in iter_stages(self.map_pipeline + self.reduce_pipeline) if s.kind == "write"]

    def to_dict(self):
        return {
            "map": [s.to_dict() for s in self.map_pipeline],
            "reduce": [s.to_dict() for s in self.reduce_pipeline],
            "combine": None if self.combine is None else self.combine.to_dict(),
            "partition": self.partition.to_dict(),
        }

    def signature(self):
        side = lambda st: ",".join(s.label() for s in st)  # noqa: E731
        return side(self.map_pipeline) + (" | " + side(self.reduce_pipeline) if self.reduce_pipeline else "")


def main_outputs(program):
    """Datasets written at the end of the program, mapped to their branch tag
    (``None`` outside bundles). Every other written dataset is a side output."""
    last = program.reduce_pipeline or program.map_pipeline
    if last and last[-1].kind == "bundle":
        return {d: b.tag for b in last[-1].branches for d in tail_writes(b.stages)}
    return {d: None for d in tail_writes(last)}


def write_location(program, dataset):
    """``(side, tag)`` of the stage writing ``dataset``."""
    for side, stages in (("map", program.map_pipeline), ("reduce", program.reduce_pipeline)):
        for s in stages:
            if s.kind == "write" and s.dataset == dataset:
                return side, None
            if s.kind == "bundle":
                for b in s.branches:
                    if any(x.kind == "write" and x.dataset == dataset for x in iter_stages(b.stages)):
                        return side, b.tag
    return None, None


def branch_partition(program, tag=None):
    """Partition spec governing the records of one bundle branch."""
    if tag is not None and program.map_pipeline and program.map_pipeline[-1].kind == "bundle":
        for b in program.map_pipeline[-1].branches:
            if b.tag == tag and b.partition is not None:
                return b.partition
    return program.partition


@dataclass
class Configuration:
    num_map_tasks: int = 4
    num_reduce_tasks: int = 4
    sort_buffer_mb: int = 100
    map_output_compression: bool = False
    output_compression: bool = False
    combiner_enabled: bool = False

    def to_dict(self):
        return {
            "num_map_tasks": self.num_map_tasks,
            "num_reduce_tasks": self.num_reduce_tasks,
            "sort_buffer_mb": self.sort_buffer_mb,
            "map_output_compression": self.map_output_compression,
            "output_compression": self.output_compression,
            "combiner_enabled": self.combiner_enabled,
        }

    @classmethod
    def from_obj(cls, obj):
        obj = dict(obj or {})
        unknown = set(obj) - set(cls().to_dict())
        if unknown:
            raise PlanParseError(f"unknown configuration fields {sorted(unknown)}")
        return cls(**obj)


@dataclass
class ConfigConstraint:
    kind: str
    payload: dict = field(default_factory=dict)

    def to_dict(self):
        return {"kind": self.kind, "payload": copy.deepcopy(self.payload)}

    @classmethod
    def from_obj(cls, obj):
        if obj["kind"] not in CONSTRAINT_KINDS:
            raise PlanParseError(f"unknown constraint kind {obj['kind']!r}")
        return cls(obj["kind"], dict(obj.get("payload") or {}))


# ---------------------------------------------------------------------------
# annotations


@dataclass
class SchemaAnnotation:
    """Field names of the six key/value slots of a job.

    ``map_flow`` and ``reduce_flow`` list the fields that pass through the
    map (resp. reduce) side unchanged. They are derived by name identity for
    single-function jobs and recorded explicitly once jobs are packed.
    """

    K1: list = field(default_factory=list)
    V1: list = field(default_factory=list)
    K2: list = field(default_factory=list)
    V2: list = field(default_factory=list)
    K3: list | None = None
    V3: list | None = None
    map_flow: list | None = None
    reduce_flow: list | None = None

    def slot(self, name):
        return getattr(self, name)

    def input_fields(self):
        return set(self.K1) | set(self.V1)

    def mid_fields(self):
        return set(self.K2) | set(self.V2)

    def output_fields(self):
        if self.K3 is None and self.V3 is None:
            return self.mid_fields()
        return set(self.K3 or []) | set(self.V3 or [])

    def map_flow_fields(self):
        if self.map_flow is not None:
            return set(self.map_flow)
        return self.input_fields() & self.mid_fields()

    def reduce_flow_fields(self):
        if self.reduce_flow is not None:
            return set(self.reduce_flow)
        return self.mid_fields() & self.output_fields()

    def to_dict(self):
        d = {s: (None if getattr(self, s) is None else list(getattr(self, s))) for s in SLOTS}
        d["map_flow"] = None if self.map_flow is None else sorted(self.map_flow)
        d["reduce_flow"] = None if self.reduce_flow is None else sorted(self.reduce_flow)
        return d

    @classmethod
    def from_obj(cls, obj):
        kw = {s: obj.get(s) for s in SLOTS}
        for s in ("K1", "V1", "K2", "V2"):
            kw[s] = list(kw[s] or [])
        return cls(**kw, map_flow=obj.get("map_flow"), reduce_flow=obj.get("reduce_flow"))


@dataclass
class Predicate:
    field: str
    op: str
    value: Any

    def __post_init__(self):
        if self.op not in COMPARATORS:
            raise PlanParseError(f"unknown comparator {self.op!r}")

    def holds(self, v):
        if v is None:
            return False
        op = self.op
        if op == "<":
            return v < self.value
        if op == "<=":
            return v <= self.value
        if op == "=":
            return v == self.value
        if op == ">=":
            return v >= self.value
        return v > self.value

    def to_list(self):
        return [self.field, self.op, self.value]


@dataclass
class FilterAnnotation:
    predicates: list
    pass_fraction: float | None = None

    def fields(self):
        return {p.field for p in self.predicates}

    def to_dict(self):
        return {"predicates": [p.to_list() for p in self.predicates], "pass_fraction": self.pass_fraction}

    @classmethod
    def from_obj(cls, obj):
        preds = []
        for p in obj.get("predicates", []):
            f, op, v = p
            if op not in COMPARATORS:
                raise PlanParseError(f"unknown comparator {op!r}")
            preds.append(Predicate(f, op, v))
        return cls(preds, obj.get("pass_fraction"))


@dataclass
class Histogram:
    """Map-output key distribution for one field.

    Explicit ``values`` ([value, count] pairs, sorted) or equi-width
    ``lo``/``hi``/``counts`` buckets.
    """

    values: list | None = None
    lo: float | None = None
    hi: float | None = None
    counts: list | None = None

    EXPLICIT_LIMIT = 1024
    BUCKETS = 64

    def total(self):
        if self.values is not None:
            return sum(c for _, c in self.values)
        return sum(self.counts)

    def distinct(self):
        if self.values is not None:
            return len(self.values)
        return None

    def scaled(self, factor):
        if self.values is not None:
            return Histogram(values=[[v, c * factor] for v, c in self.values])
        return Histogram(lo=self.lo, hi=self.hi, counts=[c * factor for c in self.counts])

    @classmethod
    def build(cls, values):
        counts = {}
        for v in values:
            counts[v] = counts.get(v, 0) + 1
        if len(counts) <= cls.EXPLICIT_LIMIT:
            return cls(values=[[v, c] for v, c in sorted(counts.items(), key=lambda kv: canon(kv[0]))])
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in counts):
            return None
        lo, hi = min(counts), max(counts)
        width = (hi - lo) / cls.BUCKETS or 1.0
        buckets = [0] * cls.BUCKETS
        for v, c in counts.items():
            buckets[min(int((v - lo) / width), cls.BUCKETS - 1)] += c
        return cls(lo=lo, hi=hi, counts=buckets)

    def to_dict(self):
        if self.values is not None:
            return {"values": [list(vc) for vc in self.values]}
        return {"lo": self.lo, "hi": self.hi, "counts": list(self.counts)}

    @classmethod
    def from_obj(cls, obj):
        if "values" in obj:
            return cls(values=[list(vc) for vc in obj["values"]])
        return cls(lo=obj["lo"], hi=obj["hi"], counts=list(obj["counts"]))


@dataclass
class PhaseProfile:
    """Dataflow and CPU totals measured (or adjusted) for one function or
    pipeline of functions."""

    records_in: float
    records_out: float
    bytes_in: float
    bytes_out: float
    cpu_seconds: float

    @property
    def selectivity(self):
        return self.records_out / self.records_in if self.records_in else 1.0

    @property
    def cpu_per_record(self):
        return self.cpu_seconds / self.records_in if self.records_in else 0.0

    @property
    def out_record_bytes(self):
        return self.bytes_out / self.records_out if self.records_out else 0.0

    def to_dict(self):
        return {
            "records_in": self.records_in,
            "records_out": self.records_out,
            "bytes_in": self.bytes_in,
            "bytes_out": self.bytes_out,
            "cpu_seconds": self.cpu_seconds,
        }

    @classmethod
    def from_obj(cls, obj):
        return cls(**{k: obj[k] for k in ("records_in", "records_out", "bytes_in", "bytes_out", "cpu_seconds")})


IO_COSTS = ("read", "write", "spill", "merge", "shuffle")


@dataclass
class ProfileAnnotation:
    """Runtime statistics of one job.

    ``io_costs`` holds seconds-per-byte figures for the read, write,
    spill/sort, merge and shuffle phases; missing entries fall back to the
    cluster's disk and network rates. ``branches`` carries per-tag profiles of
    a horizontally packed job. ``provenance`` is non-empty for adjusted
    profiles.
    """

    map: PhaseProfile
    combine: PhaseProfile | None = None
    reduce: PhaseProfile | None = None
    histograms: dict = field(default_factory=dict)
    distinct_keys: dict = field(default_factory=dict)
    io_costs: dict = field(default_factory=dict)
    side_outputs: dict = field(default_factory=dict)
    branches: dict = field(default_factory=dict)
    provenance: list = field(default_factory=list)

    def distinct_for(self, fields):
        key = ",".join(sorted(fields))
        if key in self.distinct_keys:
            return self.distinct_keys[key]
        if len(fields) == 1 and fields[0] in self.histograms:
            return self.histograms[fields[0]].distinct()
        return None

    def to_dict(self):
        return {
            "map": self.map.to_dict(),
            "combine": None if self.combine is None else self.combine.to_dict(),
            "reduce": None if self.reduce is None else self.reduce.to_dict(),
            "histograms": {k: h.to_dict() for k, h in sorted(self.histograms.items())},
            "distinct_keys": dict(sorted(self.distinct_keys.items())),
            "io_costs": dict(sorted(self.io_costs.items())),
            "side_outputs": {k: list(v) for k, v in sorted(self.side_outputs.items())},
            "branches": {str(t): p.to_dict() for t, p in sorted(self.branches.items())},
            "provenance": [list(p) for p in self.provenance],
        }

    @classmethod
    def from_obj(cls, obj):
        return cls(
            map=PhaseProfile.from_obj(obj["map"]),
            combine=None if obj.get("combine") is None else PhaseProfile.from_obj(obj["combine"]),
            reduce=None if obj.get("reduce") is None else PhaseProfile.from_obj(obj["reduce"]),
            histograms={k: Histogram.from_obj(h) for k, h in (obj.get("histograms") or {}).items()},
            distinct_keys=dict(obj.get("distinct_keys") or {}),
            io_costs=dict(obj.get("io_costs") or {}),
            side_outputs={k: list(v) for k, v in (obj.get("side_outputs") or {}).items()},
            branches={int(t): cls.from_obj(p) for t, p in (obj.get("branches") or {}).items()},
            provenance=[list(p) for p in obj.get("provenance") or []],
        )


@dataclass
class JobAnnotations:
    schema: SchemaAnnotation | None = None
    filter: FilterAnnotation | None = None
    profile: ProfileAnnotation | None = None

    def to_dict(self):
        return {
            "schema": None if self.schema is None else self.schema.to_dict(),
            "filter": None if self.filter is None else self.filter.to_dict(),
            "profile": None if self.profile is None else self.profile.to_dict(),
        }

    @classmethod
    def from_obj(cls, obj):
        obj = obj or {}
        return cls(
            schema=None if obj.get("schema") is None else SchemaAnnotation.from_obj(obj["schema"]),
            filter=None if obj.get("filter") is None else FilterAnnotation.from_obj(obj["filter"]),
            profile=None if obj.get("profile") is None else ProfileAnnotation.from_obj(obj["profile"]),
        )


@dataclass
class DatasetAnnotations:
    size_bytes: float | None = None
    records: float | None = None
    # field -> type name, split by role; used to load delimited files
    key_fields: list | None = None
    value_fields: list | None = None

    def to_dict(self):
        return {
            "size_bytes": self.size_bytes,
            "records": self.records,
            "key_fields": None if self.key_fields is None else [list(f) for f in self.key_fields],
            "value_fields": None if self.value_fields is None else [list(f) for f in self.value_fields],
        }

    @classmethod
    def from_obj(cls, obj):
        obj = obj or {}
        return cls(obj.get("size_bytes"), obj.get("records"), obj.get("key_fields"), obj.get("value_fields"))


@dataclass
class Layout:
    partition_kind: str = "none"  # none | hash | range
    partition_fields: list = field(default_factory=list)
    sort_fields: list = field(default_factory=list)
    compressed: bool = False
    partition_count: int = 1
    range_bounds: list | None = None

    def to_dict(self):
        return {
            "partition_kind": self.partition_kind,
            "partition_fields": list(self.partition_fields),
            "sort_fields": list(self.sort_fields),
            "compressed": self.compressed,
            "partition_count": self.partition_count,
            "range_bounds": None if self.range_bounds is None else list(self.range_bounds),
        }

    @classmethod
    def from_obj(cls, obj):
        obj = dict(obj or {})
        return cls(**obj)


@dataclass
class Dataset:
    id: str
    descriptor: str = ""
    layout: Layout = field(default_factory=Layout)
    annotations: DatasetAnnotations = field(default_factory=DatasetAnnotations)


@dataclass
class Job:
    id: str
    program: Program
    config: Configuration = field(default_factory=Configuration)
    annotations: JobAnnotations = field(default_factory=JobAnnotations)
    constraints: list = field(default_factory=list)
    # dataset id -> partition indexes actually read (partition pruning)
    input_selection: dict = field(default_factory=dict)

    def constraint(self, kind):
        return [c for c in self.constraints if c.kind == kind]

    def effective_reduce_tasks(self):
        if self.program.is_map_only():
            return 0
        if self.program.partition.kind == "range":
            return len(self.program.partition.range_splits) + 1
        return self.config.num_reduce_tasks


@dataclass
class ClusterSpec:
    node_count: int = 51
    map_slots_per_node: int = 3
    reduce_slots_per_node: int = 2
    per_slot_memory_mb: int = 1024
    disk_mbps: float = 60.0
    network_mbps: float = 40.0
    # calibration constants
    compression_factor: float = 0.4
    compress_cost_per_mb: float = 0.01
    task_startup_s: float = 0.5
    job_startup_s: float = 5.0
    memory_pressure_coeff: float = 0.5
    sort_cost_per_mb: float = 0.01
    merge_cost_per_mb: float = 0.005
    tag_cost_per_mb: float = 0.002
    job_submit_s: float = 1.0
    min_split_mb: float = 64.0

    @property
    def map_slots(self):
        return self.node_count * self.map_slots_per_node

    @property
    def reduce_slots(self):
        return self.node_count * self.reduce_slots_per_node

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_obj(cls, obj):
        unknown = set(obj) - set(cls().__dict__)
        if unknown:
            raise PlanParseError(f"unknown cluster fields {sorted(unknown)}")
        spec = cls(**obj)
        for k, v in spec.__dict__.items():
            if v <= 0 and k not in ("compress_cost_per_mb", "task_startup_s", "job_startup_s",
                                    "memory_pressure_coeff", "sort_cost_per_mb", "merge_cost_per_mb",
                                    "tag_cost_per_mb", "job_submit_s"):
                raise PlanValidationError("cluster-positive", f"cluster field {k} must be positive")
        return spec

    @classmethod
    def desk(cls):
        """A small cluster scaled to desk-size data: a few slots and start-up
        costs comparable to the time spent moving a few megabytes."""
        return cls(node_count=1, map_slots_per_node=4, reduce_slots_per_node=2, per_slot_memory_mb=1024,
                   disk_mbps=50.0, network_mbps=25.0, task_startup_s=0.02, job_startup_s=0.3,
                   job_submit_s=0.1, min_split_mb=0.0625)

    @classmethod
    def local(cls):
        """A single-slot cluster matching the in-process executor."""
        return cls(node_count=1, map_slots_per_node=1, reduce_slots_per_node=1, per_slot_memory_mb=4096,
                   disk_mbps=1e9, network_mbps=1e9, compress_cost_per_mb=0.0, task_startup_s=0.0,
                   job_startup_s=0.0, memory_pressure_coeff=0.0, sort_cost_per_mb=0.0,
                   merge_cost_per_mb=0.0, tag_cost_per_mb=0.0, job_submit_s=0.0, min_split_mb=1e-6)


# ---------------------------------------------------------------------------
# plan


@dataclass
class Plan:
    jobs: dict = field(default_factory=dict)
    datasets: dict = field(default_factory=dict)
    edges: list = field(default_factory=list)  # (job, dataset, "input" | "output")
    cluster: ClusterSpec | None = None

    # structural queries -------------------------------------------------

    def inputs_of(self, job_id):
        return sorted(d for j, d, k in self.edges if j == job_id and k == "input")

    def outputs_of(self, job_id):
        return sorted(d for j, d, k in self.edges if j == job_id and k == "output")

    def producers_of(self, dataset_id):
        return sorted(j for j, d, k in self.edges if d == dataset_id and k == "output")

    def producer_of(self, dataset_id):
        p = self.producers_of(dataset_id)
        return p[0] if p else None

    def consumers_of(self, dataset_id):
        return sorted(j for j, d, k in self.edges if d == dataset_id and k == "input")

    def base_datasets(self):
        return sorted(d for d in self.datasets if not self.producers_of(d))

    def sink_datasets(self):
        return sorted(d for d in self.datasets if not self.consumers_of(d) and self.producers_of(d))

    def upstream_jobs(self, job_id):
        return sorted({self.producer_of(d) for d in self.inputs_of(job_id)} - {None})

    def downstream_jobs(self, job_id):
        return sorted({c for d in self.outputs_of(job_id) for c in self.consumers_of(d)})

    def reachable(self, src, dst):
        """True when a dependency path leads from job ``src`` to job ``dst``."""
        stack, seen = [src], set()
        while stack:
            j = stack.pop()
            for n in self.downstream_jobs(j):
                if n == dst:
                    return True
                if n not in seen:
                    seen.add(n)
                    stack.append(n)
        return False

    def fingerprint(self):
        return hashlib.sha1(dumps_plan(self).encode()).hexdigest()

    def to_dict(self):
        d = {
            "jobs": {
                j.id: {
                    "program": j.program.to_dict(),
                    "config": j.config.to_dict(),
                    "constraints": [c.to_dict() for c in j.constraints],
                    "input_selection": {k: list(v) for k, v in sorted(j.input_selection.items())},
                }
                for j in self.jobs.values()
            },
            "datasets": {ds.id: {"descriptor": ds.descriptor, "layout": ds.layout.to_dict()}
                         for ds in self.datasets.values()},
            "edges": [list(e) for e in sorted(self.edges)],
            "annotations": {
                "jobs": {j.id: j.annotations.to_dict() for j in self.jobs.values()},
                "datasets": {ds.id: ds.annotations.to_dict() for ds in self.datasets.values()},
            },
        }
        if self.cluster is not None:
            d["cluster"] = self.cluster.to_dict()
        return d


def clone(plan):
    return copy.deepcopy(plan)


def dumps_plan(plan):
    return json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n"


def write_plan(plan, path):
    Path(path).write_text(dumps_plan(plan))


def _expand_program(job_id, obj, outputs):
    """Accept both the canonical pipeline form and the map/reduce shorthand."""
    m = obj.get("map")
    r = obj.get("reduce")
    canonical = isinstance(m, list)
    if canonical:
        map_pipeline = [Stage.from_obj(s) for s in m]
        reduce_pipeline = [Stage.from_obj(s) for s in (r or [])]
    else:
        if m is None:
            raise PlanParseError("job program needs a map function", path=f"jobs.{job_id}.program.map")
        map_pipeline = [Stage("map", UdfRef.from_obj(m))]
        reduce_pipeline = [Stage("reduce", UdfRef.from_obj(r))] if r else []
    prog = Program(
        map_pipeline=map_pipeline,
        reduce_pipeline=reduce_pipeline,
        combine=None if obj.get("combine") is None else UdfRef.from_obj(obj["combine"]),
        partition=PartitionSpec.from_obj(obj.get("partition")),
    )
    if not prog.written():
        tail = prog.reduce_pipeline if prog.reduce_pipeline else prog.map_pipeline
        tail.extend(write_stage(d) for d in outputs)
    return prog


def plan_from_dict(obj):
    try:
        edges = [tuple(e) for e in obj.get("edges", [])]
        for e in edges:
            if len(e) != 3 or e[2] not in ("input", "output"):
                raise PlanParseError(f"malformed edge {list(e)}", path="edges")
        ann = obj.get("annotations") or {}
        jann = ann.get("jobs") or {}
        dann = ann.get("datasets") or {}
        datasets = {}
        for did, body in (obj.get("datasets") or {}).items():
            try:
                datasets[did] = Dataset(did, body.get("descriptor", f"/data/{did}"),
                                        Layout.from_obj(body.get("layout")),
                                        DatasetAnnotations.from_obj(dann.get(did)))
            except TypeError as exc:
                raise PlanParseError(str(exc), path=f"datasets.{did}") from exc
        jobs = {}
        for jid, body in (obj.get("jobs") or {}).items():
            outputs = sorted(d for j, d, k in edges if j == jid and k == "output")
            try:
                jobs[jid] = Job(
                    id=jid,
                    program=_expand_program(jid, body.get("program") or {}, outputs),
                    config=Configuration.from_obj(body.get("config")),
                    annotations=JobAnnotations.from_obj(jann.get(jid)),
                    constraints=[ConfigConstraint.from_obj(c) for c in body.get("constraints") or []],
                    input_selection={k: list(v) for k, v in (body.get("input_selection") or {}).items()},
                )
            except (KeyError, TypeError) as exc:
                raise PlanParseError(f"bad job definition: {exc}", path=f"jobs.{jid}") from exc
        cluster = ClusterSpec.from_obj(obj["cluster"]) if obj.get("cluster") else None
    except PlanParseError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise PlanParseError(str(exc)) from exc
    plan = Plan(jobs, datasets, edges, cluster)
    validate(plan)
    return plan


def loads_plan(text):
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PlanParseError(exc.msg, line=exc.lineno) from exc
    if not isinstance(obj, dict):
        raise PlanParseError("plan document must be an object", line=1)
    return plan_from_dict(obj)


def parse_plan(path):
    return loads_plan(Path(path).read_text())


# ---------------------------------------------------------------------------
# validation


def _check_pipeline(job, stages, side, inputs):
    if not stages:
        return
    first = stages[0]
    if side == "map" and first.kind not in ("map", "bundle"):
        raise PlanValidationError("pipeline-shape", f"{job.id}: map pipeline must start with a map stage")
    if side == "reduce" and first.kind not in ("reduce", "bundle"):
        raise PlanValidationError("pipeline-shape", f"{job.id}: reduce pipeline must start with a reduce stage")
    for i, s in enumerate(stages):
        if s.kind == "bundle":
            if i != len(stages) - 1:
                raise PlanValidationError("pipeline-shape", f"{job.id}: a bundle must end its pipeline")
            tags = [b.tag for b in s.branches]
            if len(set(tags)) != len(tags) or len(tags) < 2:
                raise PlanValidationError("pipeline-shape", f"{job.id}: bundle needs >=2 distinct tags")
            for b in s.branches:
                if not b.stages:
                    raise PlanValidationError("pipeline-shape", f"{job.id}: empty branch {b.tag}")
                if b.source is not None and b.source not in inputs:
                    raise PlanValidationError("edge-endpoint", f"{job.id}: branch source {b.source} is not an input")
                _check_pipeline(job, b.stages, side, inputs)
        elif s.kind in ("map", "reduce", "combine") and s.udf is None:
            raise PlanValidationError("pipeline-shape", f"{job.id}: stage without function")


def check_partition_spec(spec, where=""):
    pf, sf = spec.partition_fields, spec.sort_fields
    if sf and list(sf[: len(pf)]) != list(pf):
        raise PlanValidationError("partition-prefix", f"{where}partition fields {pf} are not a prefix of sort fields {sf}")
    if spec.kind not in ("hash", "range"):
        raise PlanValidationError("partition-kind", f"{where}unknown partition kind {spec.kind!r}")
    if spec.kind == "range":
        splits = spec.range_splits
        if not splits or any(canon(a) >= canon(b) for a, b in zip(splits, splits[1:])):
            raise PlanValidationError("range-splits", f"{where}range splits must be present and strictly increasing")


def constraint_violations(plan, job):
    """Return human-readable descriptions of unsatisfied constraints."""
    bad = []
    cfg = job.config
    for c in job.constraints:
        p = c.payload
        spec = branch_partition(job.program, p.get("tag"))
        if c.kind == "mapTasksEqualProducerReduceTasks":
            prod = plan.jobs.get(p.get("producer"))
            if prod is None:
                bad.append(f"{c.kind}: producer {p.get('producer')} missing")
            elif cfg.num_map_tasks != prod.effective_reduce_tasks():
                bad.append(f"{c.kind}: {cfg.num_map_tasks} map tasks != {prod.effective_reduce_tasks()} "
                           f"reduce tasks of {prod.id}")
        elif c.kind == "orderPreservingInput":
            counts = {plan.datasets[d].layout.partition_count for d in plan.inputs_of(job.id) if d in plan.datasets}
            if len(counts) > 1:
                bad.append(f"{c.kind}: inputs have differing partition counts {sorted(counts)}")
            elif counts and cfg.num_map_tasks != counts.pop():
                bad.append(f"{c.kind}: map tasks must equal input partition count")
        elif c.kind == "partitionKeyFixed":
            if list(spec.partition_fields) != list(p["fields"]):
                bad.append(f"{c.kind}: partition fields must stay {p['fields']}")
        elif c.kind == "sortKeyFixed":
            if list(spec.effective_sort_fields()) != list(p["fields"]):
                bad.append(f"{c.kind}: sort fields must stay {p['fields']}")
        elif c.kind == "rangeSplitsFixed":
            if spec.kind != p.get("kind") or spec.range_splits != p.get("splits"):
                bad.append(f"{c.kind}: partition kind/splits must stay {p.get('kind')}/{p.get('splits')}")
            if "reduce_tasks" in p and job.effective_reduce_tasks() != p["reduce_tasks"]:
                bad.append(f"{c.kind}: reduce tasks must stay {p['reduce_tasks']}")
    return bad


def validate(plan):
    """Check every structural invariant; raise PlanValidationError on the first
    violation."""
    for j, d, k in plan.edges:
        if j not in plan.jobs:
            raise PlanValidationError("edge-endpoint", f"edge references unknown job {j}")
        if d not in plan.datasets:
            raise PlanValidationError("edge-endpoint", f"edge references unknown dataset {d}")
    if len(set(plan.edges)) != len(plan.edges):
        raise PlanValidationError("edge-unique", "duplicate edge")
    for did in plan.datasets:
        if len(plan.producers_of(did)) > 1:
            raise PlanValidationError("single-producer", f"dataset {did} has producers {plan.producers_of(did)}")
        lay = plan.datasets[did].layout
        if lay.partition_count < 1:
            raise PlanValidationError("layout", f"dataset {did} partition count must be >= 1")
        b = lay.range_bounds
        if b and any(canon(x) >= canon(y) for x, y in zip(b, b[1:])):
            raise PlanValidationError("layout", f"dataset {did} range bounds not strictly increasing")
    for job in plan.jobs.values():
        ins, outs = plan.inputs_of(job.id), plan.outputs_of(job.id)
        if not ins:
            raise PlanValidationError("job-io", f"job {job.id} has no input dataset")
        if not outs:
            raise PlanValidationError("job-io", f"job {job.id} has no output dataset")
        if set(ins) & set(outs):
            raise PlanValidationError("dag", f"job {job.id} reads its own output")
        prog = job.program
        if not prog.map_pipeline:
            raise PlanValidationError("pipeline-shape", f"{job.id}: empty map pipeline")
        _check_pipeline(job, prog.map_pipeline, "map", ins)
        _check_pipeline(job, prog.reduce_pipeline, "reduce", ins)
        if prog.map_pipeline[-1].kind == "bundle" and prog.reduce_pipeline:
            mt = sorted(b.tag for b in prog.map_pipeline[-1].branches)
            rp = prog.reduce_pipeline
            if rp[0].kind != "bundle" or sorted(b.tag for b in rp[0].branches) != mt:
                raise PlanValidationError("pipeline-shape", f"{job.id}: map and reduce bundles must share tags")
        written = prog.written()
        if len(written) != len(set(written)) or sorted(written) != outs:
            raise PlanValidationError("job-io", f"{job.id}: write stages {sorted(written)} != output edges {outs}")
        check_partition_spec(prog.partition, f"{job.id}: ")
        c = job.config
        if c.num_map_tasks < 1 or c.sort_buffer_mb < 1 or c.num_reduce_tasks < 0:
            raise PlanValidationError("config-bounds", f"{job.id}: configuration out of bounds")
        if prog.is_map_only() and c.num_reduce_tasks != 0:
            raise PlanValidationError("config-bounds", f"{job.id}: Map-only job must have 0 reduce tasks")
        if not prog.is_map_only() and c.num_reduce_tasks < 1:
            raise PlanValidationError("config-bounds", f"{job.id}: job with reduce needs >= 1 reduce task")
        for d, parts in job.input_selection.items():
            if d not in ins:
                raise PlanValidationError("edge-endpoint", f"{job.id}: selection on non-input {d}")
            n = plan.datasets[d].layout.partition_count
            if not parts or any(p < 0 or p >= n for p in parts):
                raise PlanValidationError("layout", f"{job.id}: partition selection out of range for {d}")
        sch = job.annotations.schema
        if sch is not None:
            for s in SLOTS:
                names = sch.slot(s)
                if names is not None and len(set(names)) != len(names):
                    raise PlanValidationError("schema-unique", f"{job.id}: duplicate field in {s}")
            if not prog.is_map_only() and not sch.K2 and not prog.is_bundled():
                raise PlanValidationError("schema-k2", f"{job.id}: K2 must be non-empty for a job with reduce")
            flt = job.annotations.filter
            if flt is not None and not flt.fields() <= sch.input_fields():
                raise PlanValidationError("filter-fields", f"{job.id}: filter fields outside K1/V1")
        for con in job.constraints:
            p = con.payload
            for key in ("producer", "consumer"):
                if key in p and p[key] not in plan.jobs:
                    raise PlanValidationError("constraint-ref", f"{job.id}: constraint references unknown job {p[key]}")
        bad = constraint_violations(plan, job)
        if bad:
            raise PlanValidationError("constraint", f"{job.id}: " + "; ".join(bad))
    topological_job_order(plan)
    return plan


# ---------------------------------------------------------------------------
# queries


def topological_job_order(plan):
    """Kahn's algorithm with ascending-id tie breaking."""
    indeg = {j: 0 for j in plan.jobs}
    succ = {j: set() for j in plan.jobs}
    for j in plan.jobs:
        for u in plan.upstream_jobs(j):
            succ[u].add(j)
    for u, vs in succ.items():
        for v in vs:
            indeg[v] += 1
    ready = sorted((j for j, n in indeg.items() if n == 0), key=_id_key)
    order = []
    while ready:
        j = ready.pop(0)
        order.append(j)
        for v in succ[j]:
            indeg[v] -= 1
            if indeg[v] == 0:
                ready.append(v)
        ready.sort(key=_id_key)
    if len(order) != len(plan.jobs):
        raise PlanValidationError("dag", "cycle detected among jobs")
    return order


def _id_key(job_id):
    # natural sort so that J10 follows J9 and numeric ids compare as numbers
    parts = []
    for is_digit, chunk in itertools.groupby(str(job_id), str.isdigit):
        s = "".join(chunk)
        parts.append((0, int(s), "") if is_digit else (1, 0, s))
    return parts


def job_depths(plan):
    """Longest-path depth of every job from the plan's sources."""
    depth = {}
    for j in topological_job_order(plan):
        ups = plan.upstream_jobs(j)
        depth[j] = 1 + max(depth[u] for u in ups) if ups else 0
    return depth


def classify_subgraph(plan, dataset):
    if dataset not in plan.datasets:
        raise KeyError(f"unknown dataset {dataset}")
    np_, nc = len(plan.producers_of(dataset)), len(plan.consumers_of(dataset))
    if np_ > 1 and nc > 1:
        return "hybrid"
    if np_ == 0:
        return "none-to-one" if nc else "one-to-none"
    if nc == 0:
        return "one-to-none"
    if np_ == 1 and nc == 1:
        # a consumer fed by several producers sees a many-to-one subgraph
        consumer = plan.consumers_of(dataset)[0]
        produced = [d for d in plan.inputs_of(consumer) if plan.producers_of(d)]
        if len({plan.producer_of(d) for d in produced}) > 1:
            return "many-to-one"
        return "one-to-one"
    if np_ == 1:
        return "one-to-many"
    return "many-to-one"


def _job_paths(plan, src, dst):
    """All job paths src -> ... -> dst, each as [(job, dataset_to_next), ...]."""
    if src == dst:
        return [[(src, None)]]
    paths = []
    for d in plan.outputs_of(src):
        for c in plan.consumers_of(d):
            for rest in _job_paths(plan, c, dst):
                paths.append([(src, d)] + rest)
    return paths


_SLOT_POS = {"K1": 0, "V1": 0, "K2": 1, "V2": 1, "K3": 2, "V3": 2}


def fields_flow_unchanged(plan, from_job, from_slot, to_job, to_slot, fields):
    """Decide whether ``fields`` pass unchanged, by name identity, from a slot
    of one job to a slot of a downstream job (or of the same job).

    Returns True, False, or None when a schema annotation along the way is
    missing.
    """
    fields = set(fields)
    paths = _job_paths(plan, from_job, to_job)
    if not paths:
        return False
    unknown = False
    for path in paths:
        ok = True
        for i, (jid, _) in enumerate(path):
            sch = plan.jobs[jid].annotations.schema
            if sch is None:
                unknown = True
                ok = None
                break
            start = _SLOT_POS[from_slot] if i == 0 else 0
            end = _SLOT_POS[to_slot] if i == len(path) - 1 else 2
            if i == 0 and not fields <= set(sch.slot(from_slot) or []):
                ok = False
            if i == len(path) - 1 and not fields <= set(sch.slot(to_slot) or []):
                ok = False
            level_fields = [sch.input_fields(), sch.mid_fields(), sch.output_fields()]
            flows = [sch.map_flow_fields(), sch.reduce_flow_fields()]
            for pos in range(start, end + 1):
                if not fields <= level_fields[pos]:
                    ok = False
            for pos in range(start, end):
                if not fields <= flows[pos]:
                    ok = False
            if ok is False:
                break
        if ok is False:
            return False
    return None if unknown else True


# ---------------------------------------------------------------------------
# canonical scalar ordering shared by executor and layouts


def canon(v):
    if v is None:
        return (-1, 0)
    if isinstance(v, bool):
        return (0, int(v))
    if isinstance(v, (int, float)):
        return (1, v)
    return (2, str(v))


def all_fields(records: Iterable[dict]):
    out = set()
    for r in records:
        out.update(r)
    return out
